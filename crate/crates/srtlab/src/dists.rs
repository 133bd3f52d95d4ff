//! Lattice probability laws with heavy right tails `F̄(x) ~ p/A(x)`.
//!
//! A law is a dense pmf table on a window of the lattice `hZ` plus exact
//! analytic tail models beyond the table (and, for spiky families, a sparse
//! list of far atoms). Builders cover the canonical Pareto-type family and
//! the counterexample families: the spike family approaching the
//! `F(x+I) = o(1/A(x))` ceiling, the two-sided cluster family for
//! `alpha < 1/2`, its `alpha = 1/2` analogue, and the smooth family with a
//! certified local-mass decay exponent.

use crate::numeric::{kahan_total, KahanSum};
use crate::regvar::{reciprocal_a_tail_sum, SlowlyVarying, TailIndexFn};
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

const MASS_TOL: f64 = 1e-12;

/// Analytic tail beyondon the pmf table.
#[derive(Clone, Debug, PartialEq)]
pub enum TailModel {
    /// `F̄(x) = min(1, scale/A(x))`, the canonical exact-tail family.
    ReciprocalA { scale: f64 },
    /// Mass `weight * coef/(n A(n))` at every integer `n` past the table.
    DensityRecipA { coef: f64, weight: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Pareto,
    Uao,
    TwoSidedSubHalf,
    HalfCluster,
    Smooth,
    Custom,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Pareto => "pareto",
            Family::Uao => "uao",
            Family::TwoSidedSubHalf => "twosided-subhalf",
            Family::HalfCluster => "half-cluster",
            Family::Smooth => "smooth",
            Family::Custom => "custom",
        }
    }

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pareto" => Family::Pareto,
            "uao" => Family::Uao,
            "twosided-subhalf" => Family::TwoSidedSubHalf,
            "half-cluster" => Family::HalfCluster,
            "smooth" => Family::Smooth,
            "custom" => Family::Custom,
            other => return Err(Error::Parse(format!("unknown family {other}"))),
        })
    }
}

/// A probability law on the lattice `hZ`.
#[derive(Clone, Debug)]
pub struct LatticeLaw {
    h: f64,
    k_min: i64,
    table: Vec<f64>,
    right_tail: Option<TailModel>,
    left_tail: Option<TailModel>,
    far_atoms: Vec<(i64, f64)>,
    two_sided: bool,
    p: f64,
    q: f64,
    a_fn: Option<TailIndexFn>,
    family: Family,
    components: Option<(Vec<f64>, Vec<f64>)>,
    probe_points: Vec<f64>,
    suffix: OnceLock<Vec<f64>>,
}

impl LatticeLaw {
    /// Raw constructor for hand-built and randomized test laws: a dense pmf
    /// with no analytic tail and no tail-index reference.
    pub fn from_table(h: f64, k_min: i64, table: Vec<f64>) -> Result<Self> {
        let law = LatticeLaw {
            h,
            k_min,
            table,
            right_tail: None,
            left_tail: None,
            far_atoms: Vec::new(),
            two_sided: k_min < 0,
            p: 1.0,
            q: 0.0,
            a_fn: None,
            family: Family::Custom,
            components: None,
            probe_points: Vec::new(),
            suffix: OnceLock::new(),
        };
        law.validate()?;
        Ok(law)
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::InvalidParam("span h must be positive".into()));
        }
        if self.table.is_empty() {
            return Err(Error::InvalidParam("pmf table is empty".into()));
        }
        for (i, &v) in self.table.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invariant(format!(
                    "pmf[{}] = {v} is not a finite nonnegative mass",
                    self.k_min + i as i64
                )));
            }
        }
        for &(k, m) in &self.far_atoms {
            if k <= self.k_table_end() || !(m >= 0.0) {
                return Err(Error::Invariant(format!("bad far atom at cell {k}")));
            }
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Invariant(format!(
                "total mass {total:.15} differs from 1 by {:.3e}",
                (total - 1.0).abs()
            )));
        }
        self.check_junction()?;
        self.check_tail_window()?;
        Ok(())
    }

    fn total_mass(&self) -> f64 {
        let mut acc = KahanSum::new();
        for &v in &self.table {
            acc.add(v);
        }
        for &(_, m) in &self.far_atoms {
            acc.add(m);
        }
        acc.add(self.right_model_tail(self.top_x()));
        acc.add(self.left_model_cdf_below_table());
        acc.value()
    }

    /// Table tail and analytic tail must agree where they meet: the analytic
    /// per-cell mass re-derived at the last table cells must match the table.
    fn check_junction(&self) -> Result<()> {
        if let Some(model) = &self.right_tail {
            let top = self.k_table_end();
            for k in (top - 3).max(self.k_min + 1)..=top {
                let i = (k - self.k_min) as usize;
                let mut from_table = self.table[i];
                // spikes merged into the table are not part of the tail model
                if let Some((_, f2)) = &self.components {
                    from_table -= 0.5 * f2[i];
                }
                let from_model = self.model_cell_mass(model, k)?;
                if (from_table - from_model).abs() > MASS_TOL {
                    return Err(Error::Invariant(format!(
                        "tail junction mismatch at cell {k}: table {from_table:.15e} vs analytic {from_model:.15e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-cell mass a tail model would assign at table cell `k`.
    fn model_cell_mass(&self, model: &TailModel, k: i64) -> Result<f64> {
        let a = self.a_fn.as_ref().ok_or_else(|| {
            Error::InvalidParam("analytic tail requires a tail-index function".into())
        })?;
        Ok(match model {
            TailModel::ReciprocalA { scale } => {
                let f_bar = |t: f64| {
                    if t <= 0.0 {
                        1.0
                    } else {
                        (scale / a.eval(t)).min(1.0)
                    }
                };
                f_bar((k - 1) as f64 * self.h) - f_bar(k as f64 * self.h)
            }
            TailModel::DensityRecipA { coef, weight } => {
                let x = k as f64 * self.h;
                let n = x.round();
                if (x - n).abs() < 1e-9 && n >= 1.0 {
                    weight * coef / (n * a.eval(n))
                } else {
                    0.0
                }
            }
        })
    }

    fn check_tail_window(&self) -> Result<()> {
        let Some(a) = &self.a_fn else { return Ok(()) };
        for &x in &self.probe_points {
            let ratio = a.eval(x) * self.upper_tail(x) / self.p;
            if !(0.9..=1.1).contains(&ratio) {
                return Err(Error::Invariant(format!(
                    "tail window check failed: A(x) F_bar(x)/p = {ratio:.6} at x = {x:.6e}"
                )));
            }
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn k_min(&self) -> i64 {
        self.k_min
    }

    pub fn k_table_end(&self) -> i64 {
        self.k_min + self.table.len() as i64 - 1
    }

    fn top_x(&self) -> f64 {
        self.k_table_end() as f64 * self.h
    }

    pub fn two_sided(&self) -> bool {
        self.two_sided
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn a_fn(&self) -> Option<&TailIndexFn> {
        self.a_fn.as_ref()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn components(&self) -> Option<(&[f64], &[f64])> {
        self.components.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    pub fn far_atoms(&self) -> &[(i64, f64)] {
        &self.far_atoms
    }

    pub fn probe_points(&self) -> &[f64] {
        &self.probe_points
    }

    /// Attaches a tail-index function without any tail claim; used when an
    /// operation needs `A` for scaling on a hand-built law.
    pub fn with_a(mut self, a: TailIndexFn) -> Self {
        self.a_fn = Some(a);
        self
    }

    /// Lattice index of `x`, which must sit on the lattice.
    pub fn cell_of(&self, x: f64) -> Result<i64> {
        let k = (x / self.h).round();
        if ((x / self.h) - k).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("x = {x} is not a lattice point of h = {}", self.h)));
        }
        Ok(k as i64)
    }

    /// Mass at the lattice point `k h`.
    pub fn pmf_cell(&self, k: i64) -> f64 {
        if k >= self.k_min && k <= self.k_table_end() {
            return self.table[(k - self.k_min) as usize];
        }
        if k > self.k_table_end() {
            if let Ok(i) = self.far_atoms.binary_search_by(|&(c, _)| c.cmp(&k)) {
                return self.far_atoms[i].1
                    + self
                        .right_tail
                        .as_ref()
                        .map(|m| self.model_cell_mass(m, k).unwrap_or(0.0))
                        .unwrap_or(0.0);
            }
            if let Some(m) = &self.right_tail {
                return self.model_cell_mass(m, k).unwrap_or(0.0);
            }
        } else if let Some(m) = &self.left_tail {
            // mirrored density cell
            return self.model_cell_mass(m, -k).unwrap_or(0.0);
        }
        0.0
    }

    fn suffix_sums(&self) -> &Vec<f64> {
        self.suffix.get_or_init(|| {
            let far: f64 = kahan_total(self.far_atoms.iter().map(|&(_, m)| m))
                + self.right_model_tail(self.top_x());
            let mut out = vec![0.0; self.table.len() + 1];
            let mut acc = KahanSum::new();
            acc.add(far);
            out[self.table.len()] = acc.value();
            for i in (0..self.table.len()).rev() {
                acc.add(self.table[i]);
                out[i] = acc.value();
            }
            out
        })
    }

    /// Analytic right-tail mass strictly beyond `x` (table excluded).
    fn right_model_tail(&self, x: f64) -> f64 {
        match &self.right_tail {
            None => 0.0,
            Some(TailModel::ReciprocalA { scale }) => {
                let a = self.a_fn.as_ref().expect("tail model without A");
                (scale / a.eval(x)).min(1.0)
            }
            Some(TailModel::DensityRecipA { coef, weight }) => {
                let a = self.a_fn.as_ref().expect("tail model without A");
                weight * reciprocal_a_tail_sum(a, *coef, x.floor() as u64)
            }
        }
    }

    /// Total analytic left mass below the table (P(X < bottom)).
    fn left_model_cdf_below_table(&self) -> f64 {
        match &self.left_tail {
            None => 0.0,
            Some(TailModel::ReciprocalA { scale }) => {
                let a = self.a_fn.as_ref().expect("tail model without A");
                let x = -(self.k_min as f64) * self.h;
                (scale / a.eval(x)).min(1.0)
            }
            Some(TailModel::DensityRecipA { coef, weight }) => {
                let a = self.a_fn.as_ref().expect("tail model without A");
                // mass at integers n with -n < bottom, i.e. n > -k_min*h
                let bottom_n = (-(self.k_min as f64) * self.h).floor() as u64;
                weight * reciprocal_a_tail_sum(a, *coef, bottom_n)
            }
        }
    }

    /// `P(X > x)` for any real `x`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        let top = self.top_x();
        if x >= top {
            let analytic = self.right_model_tail(x);
            let atoms: f64 = kahan_total(
                self.far_atoms
                    .iter()
                    .filter(|&&(k, _)| k as f64 * self.h > x)
                    .map(|&(_, m)| m),
            );
            return analytic + atoms;
        }
        let bottom = self.k_min as f64 * self.h;
        if x < bottom {
            // everything in and above the table plus what the left model holds above x
            let mut acc = self.suffix_sums()[0];
            if let Some(TailModel::DensityRecipA { coef, weight }) = &self.left_tail {
                let a = self.a_fn.as_ref().expect("tail model without A");
                // left-model mass at -n with -n > x, n < -x, n > -bottom
                let n_lo = (-(self.k_min as f64) * self.h) as i64; // exclusive
                let n_hi = (-x).ceil() as i64; // mass at -n included while -n > x
                let mut extra = KahanSum::new();
                for n in (n_lo + 1)..n_hi {
                    extra.add(weight * coef / (n as f64 * a.eval(n as f64)));
                }
                let nf = n_hi as f64;
                if -nf > x {
                    extra.add(weight * coef / (nf * a.eval(nf)));
                }
                acc += extra.value();
            }
            return acc.min(1.0);
        }
        // within the table: first cell strictly above x
        let k = (x / self.h).floor() as i64 + 1;
        let idx = (k - self.k_min).clamp(0, self.table.len() as i64) as usize;
        self.suffix_sums()[idx]
    }

    /// `F((a, b])`, exact over lattice cells and analytic tails.
    pub fn mass_interval(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(Error::InvalidParam(format!("mass_interval needs a <= b, got ({a}, {b})")));
        }
        if a == b {
            return Ok(0.0);
        }
        let k_lo = ((a / self.h).floor() as i64).saturating_add(1); // first cell with kh > a
        let k_hi = (b / self.h).floor() as i64; // last cell with kh <= b
        if k_hi < k_lo {
            return Ok(0.0);
        }
        // Direct summation when the range is modest; tail difference otherwise.
        if k_hi.saturating_sub(k_lo) <= 1 << 22 {
            let mut acc = KahanSum::new();
            for k in k_lo..=k_hi {
                acc.add(self.pmf_cell(k));
            }
            // atoms are sparse; pmf_cell covered in-range ones only if beyond table
            return Ok(acc.value());
        }
        Ok((self.upper_tail(a) - self.upper_tail(b)).max(0.0))
    }

    /// Lattice span of the support, in cells (the arithmetic span of the
    /// law is `h` times the gcd of support indices).
    pub fn lattice_span_cells(&self) -> i64 {
        let mut g: i64 = 0;
        let mut prev: Option<i64> = None;
        for (i, &v) in self.table.iter().enumerate() {
            if v > 0.0 {
                let k = self.k_min + i as i64;
                if let Some(p) = prev {
                    g = gcd(g, k - p);
                }
                prev = Some(k);
            }
        }
        for &(k, _) in &self.far_atoms {
            if let Some(p) = prev {
                g = gcd(g, k - p);
            }
            prev = Some(k);
        }
        if self.right_tail.is_some() {
            // analytic density tails populate every integer cell
            let step = (1.0 / self.h).round() as i64;
            if matches!(self.right_tail, Some(TailModel::DensityRecipA { .. })) {
                g = gcd(g, step.max(1));
            } else {
                g = gcd(g, 1);
            }
        }
        g.max(1)
    }

    pub fn support_min_cell(&self) -> i64 {
        for (i, &v) in self.table.iter().enumerate() {
            if v > 0.0 {
                return self.k_min + i as i64;
            }
        }
        self.k_min
    }

    /// Structured text header used for serialization and hashing.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        s.push_str("srtlab-law v1\n");
        s.push_str(&format!("family = {}\n", self.family.as_str()));
        s.push_str(&format!("h = {}\n", hex_f64(self.h)));
        s.push_str(&format!("k_min = {}\n", self.k_min));
        s.push_str(&format!("k_table_end = {}\n", self.k_table_end()));
        s.push_str(&format!("two_sided = {}\n", self.two_sided));
        s.push_str(&format!("p = {}\nq = {}\n", hex_f64(self.p), hex_f64(self.q)));
        match &self.a_fn {
            Some(a) => s.push_str(&a.describe()),
            None => s.push_str("alpha = none\n"),
        }
        s.push_str(&format!("right_tail = {}\n", tail_to_str(&self.right_tail)));
        s.push_str(&format!("left_tail = {}\n", tail_to_str(&self.left_tail)));
        s.push_str(&format!(
            "probe_points = {}\n",
            self.probe_points.iter().map(|&x| hex_f64(x)).collect::<Vec<_>>().join(",")
        ));
        s
    }

    /// Stable content hash of the law (header plus pmf payload).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.describe().as_bytes());
        for &v in &self.table {
            hasher.update(v.to_le_bytes());
        }
        for &(k, m) in &self.far_atoms {
            hasher.update(k.to_le_bytes());
            hasher.update(m.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the law as a text header plus hex-encoded pmf payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(self.describe().as_bytes())?;
        writeln!(w, "hash = {}", self.content_hash())?;
        writeln!(w, "-- pmf")?;
        for (i, &v) in self.table.iter().enumerate() {
            writeln!(w, "{} {}", self.k_min + i as i64, hex_f64(v))?;
        }
        writeln!(w, "-- atoms")?;
        for &(k, m) in &self.far_atoms {
            writeln!(w, "{k} {}", hex_f64(m))?;
        }
        Ok(())
    }

    /// Reads a law back and re-validates every builder invariant.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let magic = lines.next().ok_or_else(|| Error::Parse("empty law file".into()))??;
        if magic.trim() != "srtlab-law v1" {
            return Err(Error::Parse("not a srtlab law file".into()));
        }
        let mut fields = std::collections::HashMap::new();
        let mut section = String::new();
        let mut table_entries: Vec<(i64, f64)> = Vec::new();
        let mut atoms: Vec<(i64, f64)> = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("-- ") {
                section = rest.to_string();
                continue;
            }
            if section.is_empty() {
                if let Some((k, v)) = line.split_once('=') {
                    fields.insert(k.trim().to_string(), v.trim().to_string());
                }
            } else {
                let (ks, vs) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad payload line: {line}")))?;
                let k: i64 = ks.parse().map_err(|_| Error::Parse(format!("bad cell index {ks}")))?;
                let v = parse_hex_f64(vs)?;
                if section == "pmf" {
                    table_entries.push((k, v));
                } else {
                    atoms.push((k, v));
                }
            }
        }
        let get = |name: &str| -> Result<String> {
            fields
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("missing field {name}")))
        };
        let family = Family::from_str(&get("family")?)?;
        let h = parse_hex_f64(&get("h")?)?;
        let k_min: i64 = get("k_min")?.parse().map_err(|_| Error::Parse("bad k_min".into()))?;
        let two_sided = get("two_sided")? == "true";
        let p = parse_hex_f64(&get("p")?)?;
        let q = parse_hex_f64(&get("q")?)?;
        let a_fn = match get("alpha")?.as_str() {
            "none" => None,
            alpha_str => {
                let alpha: f64 = alpha_str
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad alpha {alpha_str}")))?;
                let kind = get("L.kind")?;
                let params = get("L.params")?;
                Some(TailIndexFn::new(alpha, parse_sv(&kind, &params)?)?)
            }
        };
        let right_tail = tail_from_str(&get("right_tail")?)?;
        let left_tail = tail_from_str(&get("left_tail")?)?;
        let probe_points = {
            let s = get("probe_points")?;
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(parse_hex_f64).collect::<Result<Vec<_>>>()?
            }
        };
        let mut table = vec![0.0; table_entries.len()];
        for (i, &(k, v)) in table_entries.iter().enumerate() {
            if k != k_min + i as i64 {
                return Err(Error::Parse(format!("non-contiguous pmf payload at cell {k}")));
            }
            table[i] = v;
        }
        let law = LatticeLaw {
            h,
            k_min,
            table,
            right_tail,
            left_tail,
            far_atoms: atoms,
            two_sided,
            p,
            q,
            a_fn,
            family,
            components: None,
            probe_points,
            suffix: OnceLock::new(),
        };
        law.validate()?;
        if let Some(stored) = fields.get("hash") {
            let actual = law.content_hash();
            if stored != &actual {
                return Err(Error::Invariant(format!(
                    "law hash mismatch: stored {stored}, recomputed {actual}"
                )));
            }
        }
        Ok(law)
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s.trim(), 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Parse(format!("bad f64 bits: {s}")))
}

fn tail_to_str(t: &Option<TailModel>) -> String {
    match t {
        None => "none".into(),
        Some(TailModel::ReciprocalA { scale }) => format!("reciprocal-a {}", hex_f64(*scale)),
        Some(TailModel::DensityRecipA { coef, weight }) => {
            format!("density-recip-a {} {}", hex_f64(*coef), hex_f64(*weight))
        }
    }
}

fn tail_from_str(s: &str) -> Result<Option<TailModel>> {
    let mut it = s.split_whitespace();
    match it.next() {
        Some("none") | None => Ok(None),
        Some("reciprocal-a") => {
            let scale = parse_hex_f64(it.next().ok_or_else(|| Error::Parse("missing scale".into()))?)?;
            Ok(Some(TailModel::ReciprocalA { scale }))
        }
        Some("density-recip-a") => {
            let coef = parse_hex_f64(it.next().ok_or_else(|| Error::Parse("missing coef".into()))?)?;
            let weight =
                parse_hex_f64(it.next().ok_or_else(|| Error::Parse("missing weight".into()))?)?;
            Ok(Some(TailModel::DensityRecipA { coef, weight }))
        }
        Some(other) => Err(Error::Parse(format!("unknown tail model {other}"))),
    }
}

fn parse_sv(kind: &str, params: &str) -> Result<SlowlyVarying> {
    Ok(match kind {
        "constant" => SlowlyVarying::Constant(
            params.parse().map_err(|_| Error::Parse("bad constant L".into()))?,
        ),
        "log-power" => SlowlyVarying::LogPower(
            params.parse().map_err(|_| Error::Parse("bad log-power L".into()))?,
        ),
        "reciprocal-log" => SlowlyVarying::ReciprocalLog,
        "tabulated" => {
            let mut pts = Vec::new();
            for pair in params.split(',') {
                let (x, v) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Parse("bad tabulated pair".into()))?;
                pts.push((
                    x.parse().map_err(|_| Error::Parse("bad breakpoint".into()))?,
                    v.parse().map_err(|_| Error::Parse("bad value".into()))?,
                ));
            }
            SlowlyVarying::tabulated(&pts, 2.0)?
        }
        other => return Err(Error::Parse(format!("unknown L kind {other}"))),
    })
}

/// Canonical heavy-tailed lattice family with the exact tail
/// `F̄(x) = min(1, 1/A(x))`.
pub fn make_pareto_lattice(a: TailIndexFn, h: f64, k_table: usize) -> Result<LatticeLaw> {
    if !(h > 0.0) || k_table < 8 {
        return Err(Error::InvalidParam("need h > 0 and a table of at least 8 cells".into()));
    }
    let f_bar = |t: f64| if t <= 0.0 { 1.0 } else { (1.0 / a.eval(t)).min(1.0) };
    let mut table = vec![0.0; k_table + 1];
    for (k, slot) in table.iter_mut().enumerate() {
        *slot = f_bar((k as f64 - 1.0) * h) - f_bar(k as f64 * h);
    }
    let top = k_table as f64 * h;
    let probes = vec![top * 4.0, top * 32.0, top * 256.0];
    let law = LatticeLaw {
        h,
        k_min: 0,
        table,
        right_tail: Some(TailModel::ReciprocalA { scale: 1.0 }),
        left_tail: None,
        far_atoms: Vec::new(),
        two_sided: false,
        p: 1.0,
        q: 0.0,
        a_fn: Some(a),
        family: Family::Pareto,
        components: None,
        probe_points: probes,
        suffix: OnceLock::new(),
    };
    law.validate()?;
    Ok(law)
}

/// Parameters of the spike family: a density part plus spikes at `z_seq`
/// whose masses approach the `o(1/A)` ceiling at rate `eps_seq`.
#[derive(Clone, Debug)]
pub struct UaoSpec {
    pub a: TailIndexFn,
    pub z_seq: Vec<f64>,
    pub eps_seq: Vec<f64>,
    pub n0: u64,
    pub k_table: usize,
}

/// Derived quantities recorded while building the spike family.
#[derive(Clone, Debug)]
pub struct UaoBuildInfo {
    pub c1: f64,
    pub c2: f64,
    pub selected: Vec<usize>,
    pub spike_cells: Vec<i64>,
    pub spike_masses: Vec<f64>,
}

pub fn make_uao_family(spec: &UaoSpec) -> Result<(LatticeLaw, UaoBuildInfo)> {
    let a = &spec.a;
    let alpha = a.alpha();
    if spec.z_seq.len() != spec.eps_seq.len() || spec.z_seq.is_empty() {
        return Err(Error::InvalidParam("z_seq and eps_seq must be equal-length and nonempty".into()));
    }
    for w in spec.z_seq.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidParam("z_seq must be strictly increasing".into()));
        }
    }
    if spec.z_seq[0] <= spec.n0 as f64 {
        return Err(Error::InvalidParam("spikes must sit above n0".into()));
    }
    if spec.eps_seq.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidParam("eps_seq must be positive".into()));
    }
    let n0 = spec.n0.max(1);
    let k_table = spec.k_table;

    // Spike positions rounded to the (unit) lattice.
    let cells: Vec<i64> = spec.z_seq.iter().map(|&z| (z + 0.5).floor() as i64).collect();
    for w in cells.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidParam("spike positions collide after lattice rounding".into()));
        }
    }

    // Greedy subsequence: each selected ratio eps/A(z) at most half the last.
    let ratio = |i: usize| spec.eps_seq[i] / a.eval(cells[i] as f64);
    let mut selected = vec![0usize];
    let mut last = ratio(0);
    for i in 1..cells.len() {
        let r = ratio(i);
        if r <= 0.5 * last {
            selected.push(i);
            last = r;
        }
    }
    if selected.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "spike subsequence selection stalled: only {} of 3 required indices",
            selected.len()
        )));
    }

    let c2 = 1.0 / kahan_total(selected.iter().map(|&i| ratio(i)));
    let coef = 2.0 * alpha;
    let g = |n: u64| coef / (n as f64 * a.eval(n as f64));
    let c1 = kahan_total(((n0 + 1)..=k_table as u64).map(g))
        + reciprocal_a_tail_sum(a, coef, k_table as u64);
    if !(c1 < 1.0) {
        return Err(Error::InvalidParam(format!(
            "density part has mass c1 = {c1:.6} >= 1; raise n0"
        )));
    }

    let mut f1 = vec![0.0; k_table + 1];
    f1[n0 as usize] = 1.0 - c1;
    for n in (n0 + 1)..=(k_table as u64) {
        f1[n as usize] = g(n);
    }
    let mut f2 = vec![0.0; k_table + 1];
    let mut far_atoms: Vec<(i64, f64)> = Vec::new();
    let mut spike_masses = Vec::with_capacity(selected.len());
    for &i in &selected {
        let mass = c2 * ratio(i);
        spike_masses.push(mass);
        if cells[i] <= k_table as i64 {
            f2[cells[i] as usize] += mass;
        } else {
            far_atoms.push((cells[i], 0.5 * mass));
        }
    }
    let table: Vec<f64> = f1.iter().zip(&f2).map(|(&u, &v)| 0.5 * (u + v)).collect();

    let z_max = cells[*selected.last().unwrap()] as f64;
    let probes = vec![64.0 * z_max, 512.0 * z_max, 4096.0 * z_max];
    let law = LatticeLaw {
        h: 1.0,
        k_min: 0,
        table,
        right_tail: Some(TailModel::DensityRecipA { coef, weight: 0.5 }),
        left_tail: None,
        far_atoms,
        two_sided: false,
        p: 1.0,
        q: 0.0,
        a_fn: Some(a.clone()),
        family: Family::Uao,
        components: Some((f1, f2)),
        probe_points: probes,
        suffix: OnceLock::new(),
    };
    law.validate()?;

    let info = UaoBuildInfo {
        c1,
        c2,
        selected: selected.clone(),
        spike_cells: selected.iter().map(|&i| cells[i]).collect(),
        spike_masses,
    };
    // Spike floor holds by construction; assert it anyway.
    for (&cell, &mass) in info.spike_cells.iter().zip(&info.spike_masses) {
        let have = law.pmf_cell(cell);
        let floor = 0.5 * mass;
        if have + 1e-15 < floor {
            return Err(Error::Invariant(format!(
                "spike mass {have:.3e} at {cell} under the floor {floor:.3e}"
            )));
        }
    }
    Ok((law, info))
}

/// Cluster bookkeeping for the two-sided counterexample families.
#[derive(Clone, Debug)]
pub struct ClusterInfo {
    pub c1: f64,
    pub c2: f64,
    pub n0: u64,
    /// Per cluster: anchor exponent `n`, cells, masses.
    pub clusters: Vec<(u32, Vec<i64>, Vec<f64>)>,
}

fn choose_n0(a: &TailIndexFn, coef: f64, cap: f64) -> u64 {
    let mut n0 = 8u64;
    while reciprocal_a_tail_sum(a, coef, n0) >= cap {
        n0 *= 2;
        if n0 > 1 << 40 {
            break;
        }
    }
    n0
}

fn assemble_two_sided_cluster(
    a: TailIndexFn,
    grid_h: f64,
    n_cluster_min: u32,
    n_cluster_max: u32,
    family: Family,
    z_of_k: impl Fn(u64) -> f64,
    hat_k: impl Fn(f64) -> u64,
    raw_mass: impl Fn(f64) -> f64,
    probe_points: Vec<f64>,
) -> Result<(LatticeLaw, ClusterInfo)> {
    let steps_per_unit = 1.0 / grid_h;
    if !(grid_h > 0.0 && grid_h <= 1.0 && (steps_per_unit - steps_per_unit.round()).abs() < 1e-12) {
        return Err(Error::InvalidParam(
            "grid_h must be a reciprocal of a positive integer (integers must sit on the lattice)"
                .into(),
        ));
    }
    let step = steps_per_unit.round() as i64;
    let coef = 2.0 * a.alpha();
    let n0 = choose_n0(&a, coef, 0.45);
    let tail_beyond_n0 = reciprocal_a_tail_sum(&a, coef, n0);
    let x_top = (2u64 << n_cluster_max) as f64; // x_{n_max + 1}
    let k_table_half = (x_top * steps_per_unit).round() as i64 + 4 * step;
    let len = (2 * k_table_half + 1) as usize;

    // Symmetric density component on the integers.
    let g = |n: u64| coef / (n as f64 * a.eval(n as f64));
    let in_table_density = kahan_total(((n0 + 1)..=(k_table_half / step) as u64).map(g));
    let c1 = 0.5 - tail_beyond_n0;
    if !(c1 > 0.0) {
        return Err(Error::Invariant("atom mass c1 is not positive".into()));
    }
    let idx = |k: i64| (k + k_table_half) as usize;
    let mut f1 = vec![0.0; len];
    f1[idx(n0 as i64 * step)] = c1;
    f1[idx(-(n0 as i64) * step)] = c1;
    for n in (n0 + 1)..=((k_table_half / step) as u64) {
        f1[idx(n as i64 * step)] = g(n);
        f1[idx(-(n as i64) * step)] = g(n);
    }
    let _ = in_table_density;

    // Cluster component on the positive side.
    let mut clusters = Vec::new();
    let mut raw_total = KahanSum::new();
    let mut min_gap = f64::INFINITY;
    for n in n_cluster_min..=n_cluster_max {
        let x_n = (1u64 << n) as f64;
        let kh = hat_k(x_n);
        let mut cells = Vec::with_capacity(kh as usize);
        let mut raws = Vec::with_capacity(kh as usize);
        let mut prev_z: Option<f64> = None;
        for k in 0..kh {
            let z = z_of_k(k);
            if let Some(pz) = prev_z {
                min_gap = min_gap.min(z - pz);
            }
            if k > 0 {
                prev_z = Some(z);
            } else {
                prev_z = Some(z);
            }
            let y = x_n + z;
            if y >= 2.0 * x_n {
                return Err(Error::Invariant(format!(
                    "cluster point {y} escapes [{x_n}, {})",
                    2.0 * x_n
                )));
            }
            let cell = (y * steps_per_unit + 0.5).floor() as i64;
            let y_round = cell as f64 * grid_h;
            cells.push(cell);
            raws.push(raw_mass(y_round));
        }
        for w in cells.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParam(format!(
                    "cluster points collide on the grid near cell {}",
                    w[0]
                )));
            }
        }
        for &r in &raws {
            raw_total.add(r);
        }
        clusters.push((n, cells, raws));
    }
    if min_gap < grid_h {
        return Err(Error::InvalidParam(format!(
            "grid_h = {grid_h} is coarser than the minimal cluster gap {min_gap:.6}"
        )));
    }
    let c2 = 1.0 / raw_total.value();
    let mut f2 = vec![0.0; len];
    let mut info_clusters = Vec::new();
    for (n, cells, raws) in clusters {
        let masses: Vec<f64> = raws.iter().map(|&r| c2 * r).collect();
        for (&cell, &m) in cells.iter().zip(&masses) {
            f2[idx(cell)] += m;
        }
        info_clusters.push((n, cells, masses));
    }

    let table: Vec<f64> = f1.iter().zip(&f2).map(|(&u, &v)| 0.5 * (u + v)).collect();
    let law = LatticeLaw {
        h: grid_h,
        k_min: -k_table_half,
        table,
        right_tail: Some(TailModel::DensityRecipA { coef, weight: 0.5 }),
        left_tail: Some(TailModel::DensityRecipA { coef, weight: 0.5 }),
        far_atoms: Vec::new(),
        two_sided: true,
        p: 1.0,
        q: 1.0,
        a_fn: Some(a),
        family,
        components: Some((f1, f2)),
        probe_points,
        suffix: OnceLock::new(),
    };
    law.validate()?;
    Ok((law, ClusterInfo { c1, c2, n0, clusters: info_clusters }))
}

/// Two-sided cluster family for `alpha < 1/2`: symmetric density part plus
/// clusters `E_n = {2^n + k^(1/(1-2alpha))}` whose mirrored contribution to
/// the two-sided diagnostic grows like `sqrt(log x)`.
pub fn make_twosided_counterexample(
    alpha: f64,
    grid_h: f64,
    n_cluster_max: u32,
) -> Result<(LatticeLaw, ClusterInfo)> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidParam(format!("alpha = {alpha} must lie in (0, 1/2)")));
    }
    let a = TailIndexFn::new(alpha, SlowlyVarying::Constant(1.0))?;
    let inv = 1.0 / (1.0 - 2.0 * alpha);
    let x_top = (2u64 << n_cluster_max) as f64;
    let probes = vec![x_top * 16.0, x_top * 128.0, x_top * 1024.0];
    assemble_two_sided_cluster(
        a,
        grid_h,
        1,
        n_cluster_max,
        Family::TwoSidedSubHalf,
        |k| (k as f64).powf(inv),
        |x_n| x_n.powf(1.0 - 2.0 * alpha).floor() as u64,
        |y| 1.0 / (y.powf(1.0 - alpha) * y.ln().sqrt()),
        probes,
    )
}

/// The `alpha = 1/2` cluster family with `A(x) = sqrt(x)/log(1+x)`.
pub fn make_half_counterexample(grid_h: f64, n_cluster_max: u32) -> Result<(LatticeLaw, ClusterInfo)> {
    let a = TailIndexFn::new(0.5, SlowlyVarying::ReciprocalLog)?;
    let probes = vec![1e11, 1e12, 1e13];
    assemble_two_sided_cluster(
        a,
        grid_h,
        1,
        n_cluster_max,
        Family::HalfCluster,
        |k| (k as f64).sqrt().exp() - 1.0,
        |x_n| {
            let l = (1.0 + x_n).ln().floor();
            (l * l) as u64
        },
        |y| 1.0 / (y.sqrt() * (1.0 + y).ln() * (1.0 + y).ln().ln().sqrt()),
        probes,
    )
}

/// Certificate recorded by the smooth family builder.
#[derive(Clone, Debug)]
pub struct SmoothCertificate {
    pub required_exponent: f64,
    pub fitted_exponent: f64,
    pub witnessed_c: f64,
    pub samples: usize,
}

/// Fine-lattice canonical family whose local mass decay
/// `F((x, x+s])/F̄(x) <= C (s/x)^(1-2alpha+eps)` is certified on a sample
/// grid at build time.
pub fn make_smooth_family(alpha: f64, eps: f64) -> Result<(LatticeLaw, SmoothCertificate)> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidParam(format!("alpha = {alpha} must lie in (0, 1/2]")));
    }
    if !(eps > 0.0 && eps < 2.0 * alpha) {
        return Err(Error::InvalidParam(format!(
            "eps = {eps} rejected: need 0 < eps < 2 alpha so the required exponent stays below 1"
        )));
    }
    let h = 0.25;
    let a = TailIndexFn::new(alpha, SlowlyVarying::Constant(1.0))?;
    let k_table = ((1 << 16) as f64 + 300.0) as usize * 4;
    let law = make_pareto_lattice(a, h, k_table)?;
    let law = LatticeLaw { family: Family::Smooth, ..law };

    let required = 1.0 - 2.0 * alpha + eps;
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut witnessed_c: f64 = 0.0;
    let mut worst: Option<(f64, f64)> = None;
    let mut x = 1024.0f64;
    while x <= 65536.0 {
        let f_bar = law.upper_tail(x);
        let mut s = 1.0f64;
        while s * s <= x {
            let ratio = law.mass_interval(x, x + s)? / f_bar;
            if ratio > 0.0 {
                lx.push((s / x).ln());
                ly.push(ratio.ln());
                let c = ratio / (s / x).powf(required);
                if c > witnessed_c {
                    witnessed_c = c;
                    worst = Some((x, s));
                }
            }
            s *= 2.0;
        }
        x *= 4.0;
    }
    if lx.len() < 6 {
        return Err(Error::DegenerateFit("too few positive-mass samples for certification".into()));
    }
    let (slope, _, _) = crate::numeric::fit_line(&lx, &ly);
    if slope + 0.05 < required {
        let (wx, ws) = worst.unwrap_or((0.0, 0.0));
        return Err(Error::Invariant(format!(
            "smoothness certification failed: fitted exponent {slope:.4} < required {required:.4} (worst pair x={wx}, s={ws})"
        )));
    }
    Ok((
        law,
        SmoothCertificate {
            required_exponent: required,
            fitted_exponent: slope,
            witnessed_c,
            samples: lx.len(),
        },
    ))
}
