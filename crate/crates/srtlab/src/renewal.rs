//! Exact walk marginals `P(S_n = kh)`, renewal tables `u(k) = U({kh})`,
//! restricted (big-jump-free) marginals, and partial small-`n` sums.
//!
//! One-sided laws never re-enter a window from above, so windowed values
//! are exact and the mass outside the window is exactly `1 - sum`. For
//! two-sided laws the window clip is a certified undercount: every reported
//! value is a lower bound within `escaped_mass` of the truth.

use crate::dists::LatticeLaw;
use crate::numeric::{integrate_to_infinity, KahanSum};
use crate::{Error, Result};
use realfft::RealFftPlanner;
use std::cell::RefCell;

/// Resource cap for windowed computations.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub max_cells: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_cells: 1 << 26 }
    }
}

impl Budget {
    pub fn with_max_cells(max_cells: usize) -> Self {
        Budget { max_cells }
    }

    fn check(&self, cells: i64, what: &str) -> Result<()> {
        if cells <= 0 {
            return Err(Error::InvalidParam(format!("{what}: empty window")));
        }
        if cells as usize > self.max_cells {
            return Err(Error::BudgetExceeded(format!(
                "{what}: window of {cells} cells exceeds the budget of {} cells",
                self.max_cells
            )));
        }
        Ok(())
    }
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Dust collected when transform convolution produces tiny negatives.
const NEG_CLAMP_REL: f64 = 1e-15;

fn fft_convolve(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let out_len = a.len() + b.len() - 1;
    let fft_len = out_len.next_power_of_two().max(8);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let r2c = planner.plan_fft_forward(fft_len);
        let c2r = planner.plan_fft_inverse(fft_len);
        let mut ta = vec![0.0; fft_len];
        ta[..a.len()].copy_from_slice(a);
        let mut sa = r2c.make_output_vec();
        r2c.process(&mut ta, &mut sa).expect("fft forward");
        let same = std::ptr::eq(a, b) || a == b;
        let mut spectrum = if same {
            let mut s = sa.clone();
            for (v, w) in s.iter_mut().zip(&sa) {
                *v *= *w;
            }
            s
        } else {
            let mut tb = vec![0.0; fft_len];
            tb[..b.len()].copy_from_slice(b);
            let mut sb = r2c.make_output_vec();
            r2c.process(&mut tb, &mut sb).expect("fft forward");
            for (v, w) in sb.iter_mut().zip(&sa) {
                *v *= *w;
            }
            sb
        };
        let mut out = vec![0.0; fft_len];
        c2r.process(&mut spectrum, &mut out).expect("fft inverse");
        let scale = 1.0 / fft_len as f64;
        out.truncate(out_len);
        let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs())) * scale;
        let floor = -NEG_CLAMP_REL * peak.max(1e-300);
        let mut dust = 0.0;
        for v in out.iter_mut() {
            *v *= scale;
            if *v < 0.0 {
                if *v > floor {
                    dust += -*v;
                    *v = 0.0;
                } else {
                    // leave large negatives visible; the caller validates
                }
            }
        }
        (out, dust)
    })
}

fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    if a.len() <= b.len() {
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                out[i + j] += ai * bj;
            }
        }
    } else {
        return direct_convolve(b, a);
    }
    out
}

fn convolve_values(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let work = a.len() as u64 * b.len() as u64;
    if work <= 1 << 16 {
        (direct_convolve(a, b), 0.0)
    } else {
        fft_convolve(a, b)
    }
}

/// Windowed pmf of a walk position `S_n`.
#[derive(Clone, Debug)]
pub struct WalkPmf {
    pub n: u64,
    pub k_lo: i64,
    pub values: Vec<f64>,
    /// Certified bound on the probability mass outside the window.
    pub escaped_mass: f64,
    /// Negative transform dust clamped to zero.
    pub dust: f64,
}

impl WalkPmf {
    pub fn k_hi(&self) -> i64 {
        self.k_lo + self.values.len() as i64 - 1
    }

    pub fn at_cell(&self, k: i64) -> f64 {
        if k < self.k_lo || k > self.k_hi() {
            0.0
        } else {
            self.values[(k - self.k_lo) as usize]
        }
    }

    pub fn mass(&self) -> f64 {
        crate::numeric::kahan_total(self.values.iter().copied())
    }

    fn delta(at: i64, window: (i64, i64)) -> WalkPmf {
        let len = (window.1 - window.0 + 1) as usize;
        let mut values = vec![0.0; len];
        let mut escaped = 1.0;
        if at >= window.0 && at <= window.1 {
            values[(at - window.0) as usize] = 1.0;
            escaped = 0.0;
        }
        WalkPmf { n: 0, k_lo: window.0, values, escaped_mass: escaped, dust: 0.0 }
    }

    fn clip(mut self, window: (i64, i64)) -> WalkPmf {
        let (lo, hi) = window;
        let mut clipped = KahanSum::new();
        if self.k_lo < lo {
            let cut = ((lo - self.k_lo) as usize).min(self.values.len());
            for &v in &self.values[..cut] {
                clipped.add(v);
            }
            self.values.drain(..cut);
            self.k_lo = lo;
        }
        let len = self.values.len() as i64;
        let keep = (hi - self.k_lo + 1).clamp(0, len) as usize;
        for &v in &self.values[keep..] {
            clipped.add(v);
        }
        self.values.truncate(keep);
        if self.values.is_empty() {
            self.k_lo = lo;
            self.values = vec![0.0; (hi - lo + 1) as usize];
        }
        self.escaped_mass += clipped.value();
        self
    }

    fn validate(&self) -> Result<()> {
        let mut sum = KahanSum::new();
        for &v in &self.values {
            if v < -1e-12 {
                return Err(Error::Invariant(format!("walk pmf value {v:.3e} below -1e-12")));
            }
            sum.add(v.max(0.0));
        }
        let s = sum.value();
        if s > 1.0 + 1e-9 {
            return Err(Error::Invariant(format!("walk pmf mass {s} exceeds 1")));
        }
        Ok(())
    }
}

/// Exact discrete convolution of two windowed pmfs, restricted to `window`.
/// Escaped mass propagates as `e_a + e_b` plus whatever leaves the window.
pub fn convolve(a: &WalkPmf, b: &WalkPmf, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    budget.check(window.1 - window.0 + 1, "convolve")?;
    let mass_a = a.mass();
    let mass_b = b.mass();
    let (values, dust) = convolve_values(&a.values, &b.values);
    let out = WalkPmf {
        n: a.n + b.n,
        k_lo: a.k_lo + b.k_lo,
        values,
        escaped_mass: 0.0,
        dust: a.dust + b.dust + dust,
    };
    let mut out = out.clip(window);
    let leak = (mass_a * mass_b - out.mass()).max(0.0);
    out.escaped_mass = a.escaped_mass + b.escaped_mass + leak;
    out.validate()?;
    Ok(out)
}

/// The law's pmf restricted to a window, with increments that cannot land
/// back in the window removed into the escape account.
fn law_base(law: &LatticeLaw, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    let width = window.1 - window.0;
    let lo = law.k_min().max(-width);
    let hi = width;
    budget.check(hi - lo + 1, "law window")?;
    let mut values = Vec::with_capacity((hi - lo + 1) as usize);
    for k in lo..=hi {
        values.push(law.pmf_cell(k));
    }
    let mut base = WalkPmf { n: 1, k_lo: lo, values, escaped_mass: 0.0, dust: 0.0 };
    base.escaped_mass = (1.0 - base.mass()).max(0.0);
    Ok(base)
}

/// Exact windowed pmf of `S_n` by binary exponentiation.
pub fn walk_pmf(law: &LatticeLaw, n: u64, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    budget.check(window.1 - window.0 + 1, "walk_pmf")?;
    if n == 0 {
        return Ok(WalkPmf::delta(0, window));
    }
    let base = law_base(law, window, budget)?;
    pmf_power(&base, n, window, budget)
}

fn pmf_power(base: &WalkPmf, n: u64, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    debug_assert!(n >= 1);
    let mut result: Option<WalkPmf> = None;
    let mut sq = base.clone().clip(window);
    let mut remaining = n;
    loop {
        if remaining & 1 == 1 {
            result = Some(match result {
                None => sq.clone(),
                Some(r) => convolve(&r, &sq, window, budget)?,
            });
        }
        remaining >>= 1;
        if remaining == 0 {
            break;
        }
        sq = convolve(&sq, &sq, window, budget)?;
    }
    let mut out = result.expect("n >= 1");
    out.n = n;
    Ok(out)
}

/// Renewal masses `u(k) = U({kh})` on `[0, K]`.
#[derive(Clone, Debug)]
pub struct RenewalTable {
    pub h: f64,
    pub k_lo: i64,
    pub u: Vec<f64>,
    pub method: String,
    pub law_hash: String,
    /// Uniform per-cell truncation bound (two-sided method only).
    pub truncation_error: Option<f64>,
    pub n_max: Option<u64>,
    pub dust: f64,
    pub escaped_mass: f64,
}

impl RenewalTable {
    pub fn u_cell(&self, k: i64) -> f64 {
        if k < self.k_lo || k >= self.k_lo + self.u.len() as i64 {
            0.0
        } else {
            self.u[(k - self.k_lo) as usize]
        }
    }

    /// `U([0, x])` as a partial sum of table cells.
    pub fn integrated(&self, x: f64) -> f64 {
        let k = (x / self.h).floor() as i64;
        let mut acc = KahanSum::new();
        for kk in 0.max(self.k_lo)..=k.min(self.k_lo + self.u.len() as i64 - 1) {
            acc.add(self.u_cell(kk));
        }
        acc.value()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenewalMethod {
    Recursion,
    SeriesReciprocal,
    Auto,
}

/// One-sided renewal table: the direct recursion is the correctness
/// oracle, the power-series reciprocal is the fast path.
pub fn renewal_measure_onesided(
    law: &LatticeLaw,
    k_max: usize,
    method: RenewalMethod,
) -> Result<RenewalTable> {
    if law.two_sided() || law.k_min() < 0 {
        return Err(Error::InvalidParam("one-sided renewal needs a law on the nonnegative lattice".into()));
    }
    let f0 = law.pmf_cell(0);
    if f0 >= 1.0 - 1e-14 {
        return Err(Error::InvalidParam("degenerate law with all mass at zero".into()));
    }
    let f: Vec<f64> = (0..=k_max as i64).map(|k| law.pmf_cell(k)).collect();
    let method = match method {
        RenewalMethod::Auto => {
            if k_max <= 4096 {
                RenewalMethod::Recursion
            } else {
                RenewalMethod::SeriesReciprocal
            }
        }
        m => m,
    };
    let (u, dust, name) = match method {
        RenewalMethod::Recursion => (renewal_recursion(&f), 0.0, "recursion"),
        RenewalMethod::SeriesReciprocal => {
            let (u, dust) = series_reciprocal(&f)?;
            (u, dust, "series-reciprocal")
        }
        RenewalMethod::Auto => unreachable!(),
    };
    for (k, &v) in u.iter().enumerate() {
        if v < -1e-9 {
            return Err(Error::Invariant(format!("renewal mass u[{k}] = {v:.3e} negative")));
        }
    }
    let u = u.into_iter().map(|v| v.max(0.0)).collect();
    Ok(RenewalTable {
        h: law.h(),
        k_lo: 0,
        u,
        method: name.into(),
        law_hash: law.content_hash(),
        truncation_error: None,
        n_max: None,
        dust,
        escaped_mass: 0.0,
    })
}

fn renewal_recursion(f: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (1.0 - f[0]);
    let mut u = vec![0.0; f.len()];
    u[0] = inv;
    for k in 1..f.len() {
        let mut acc = 0.0;
        for j in 1..=k {
            acc += f[j] * u[k - j];
        }
        u[k] = acc * inv;
    }
    u
}

/// Power-series reciprocal of `1 - F` by Newton iteration with transform
/// convolution; doubles the exact coefficient prefix each round.
fn series_reciprocal(f: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = f.len();
    let mut p = vec![0.0; n];
    p[0] = 1.0 - f[0];
    for k in 1..n {
        p[k] = -f[k];
    }
    let mut r = vec![1.0 / p[0]];
    let mut dust = 0.0;
    while r.len() < n {
        let m = (r.len() * 2).min(n);
        // r_new = r (2 - p r) mod z^m
        let (pr, d1) = convolve_values(&p[..m.min(p.len())], &r);
        dust += d1;
        let mut t: Vec<f64> = pr[..m.min(pr.len())].to_vec();
        t.resize(m, 0.0);
        for v in t.iter_mut() {
            *v = -*v;
        }
        t[0] += 2.0;
        let (rn, d2) = convolve_values(&r, &t);
        dust += d2;
        let mut rn: Vec<f64> = rn[..m.min(rn.len())].to_vec();
        rn.resize(m, 0.0);
        r = rn;
    }
    r.truncate(n);
    Ok((r, dust))
}

/// Brute-force renewal oracle: sums exact walk marginals until the walk
/// leaves `[0, K]` for good. Exact for laws with minimal support above 0.
pub fn renewal_enumeration_oracle(law: &LatticeLaw, k_max: usize, budget: &Budget) -> Result<Vec<f64>> {
    let min_cell = law.support_min_cell();
    if min_cell < 1 {
        return Err(Error::InvalidParam("enumeration oracle needs minimal support at or above h".into()));
    }
    let window = (0i64, k_max as i64);
    let mut u = vec![0.0; k_max + 1];
    u[0] += 1.0;
    let base = law_base(law, window, budget)?;
    let mut cur = base.clone();
    let mut n = 1u64;
    loop {
        for k in 0..=k_max as i64 {
            u[k as usize] += cur.at_cell(k);
        }
        n += 1;
        if n * min_cell as u64 > k_max as u64 {
            break;
        }
        cur = convolve(&cur, &base, window, budget)?;
    }
    Ok(u)
}

/// Certified tail of `sum 1/a_n` past `n_max`.
pub fn a_n_tail_sum(law: &LatticeLaw, n_max: u64) -> Result<f64> {
    let a = law
        .a_fn()
        .ok_or_else(|| Error::InvalidParam("two-sided renewal needs a tail-index function".into()))?;
    let g = |t: f64| 1.0 / a.inverse(t).unwrap_or(f64::INFINITY);
    let integral = integrate_to_infinity(g, n_max as f64, 1e-10);
    Ok(integral + 0.5 * g(n_max as f64))
}

/// Windowed two-sided renewal table: partial sum over `n <= n_max` by
/// doubling, plus a certified uniform remainder bound.
pub fn renewal_measure_twosided(
    law: &LatticeLaw,
    window: (i64, i64),
    n_max: u64,
    budget: &Budget,
    tolerance: Option<f64>,
) -> Result<RenewalTable> {
    if n_max < 1 {
        return Err(Error::InvalidParam("n_max must be at least 1".into()));
    }
    budget.check(window.1 - window.0 + 1, "renewal_measure_twosided")?;
    let a = law
        .a_fn()
        .ok_or_else(|| Error::InvalidParam("two-sided renewal needs a tail-index function".into()))?;
    let base = law_base(law, window, budget)?;

    // Binary decomposition: maintain G_m = sum_{n=1..m} f^{*n} and P_m = f^{*m}.
    let mut g: Option<WalkPmf> = None;
    let mut p: Option<WalkPmf> = None;
    let mut c_sup: f64 = 0.0;
    let mut observe = |w: &WalkPmf| -> Result<()> {
        if w.n >= 2 {
            let peak = w.values.iter().fold(0.0f64, |m, &v| m.max(v));
            let an = a.inverse(w.n as f64)?;
            c_sup = c_sup.max(peak * an);
        }
        Ok(())
    };
    for bit in (0..64 - n_max.leading_zeros()).rev() {
        if let (Some(gv), Some(pv)) = (g.as_mut(), p.as_mut()) {
            // double: G_{2m} = G_m + P_m * G_m ; P_{2m} = P_m * P_m
            let cross = convolve(pv, gv, window, budget)?;
            let mut g2 = gv.clone();
            add_into(&mut g2, &cross);
            let p2 = convolve(pv, pv, window, budget)?;
            observe(&p2)?;
            *gv = g2;
            *pv = p2;
        }
        if (n_max >> bit) & 1 == 1 {
            match (g.as_mut(), p.as_mut()) {
                (None, None) => {
                    g = Some(base.clone().clip(window));
                    p = Some(base.clone().clip(window));
                }
                (Some(gv), Some(pv)) => {
                    let p1 = convolve(pv, &base, window, budget)?;
                    observe(&p1)?;
                    add_into(gv, &p1);
                    *pv = p1;
                }
                _ => unreachable!(),
            }
        }
    }
    let gsum = g.expect("n_max >= 1");
    // The uniform bound max_k P(S_n = kh) <= C/a_n holds with an unknown
    // constant; certify it empirically over the probed levels and double it.
    let c_certified = 2.0 * c_sup;
    let remainder = c_certified * a_n_tail_sum(law, n_max)?;
    if let Some(tol) = tolerance {
        if remainder > tol {
            return Err(Error::Invariant(format!(
                "truncation remainder {remainder:.3e} exceeds the requested tolerance {tol:.3e}"
            )));
        }
    }
    let mut u = vec![0.0; (window.1 - window.0 + 1) as usize];
    for (i, v) in u.iter_mut().enumerate() {
        *v = gsum.values[i];
    }
    if window.0 <= 0 && window.1 >= 0 {
        u[(-window.0) as usize] += 1.0; // n = 0 term
    }
    Ok(RenewalTable {
        h: law.h(),
        k_lo: window.0,
        u,
        method: "twosided-partial-sum".into(),
        law_hash: law.content_hash(),
        truncation_error: Some(remainder),
        n_max: Some(n_max),
        dust: gsum.dust,
        escaped_mass: gsum.escaped_mass,
    })
}

fn add_into(acc: &mut WalkPmf, other: &WalkPmf) {
    debug_assert_eq!(acc.k_lo, other.k_lo);
    debug_assert_eq!(acc.values.len(), other.values.len());
    for (a, &b) in acc.values.iter_mut().zip(&other.values) {
        *a += b;
    }
    acc.escaped_mass += other.escaped_mass;
    acc.dust += other.dust;
}

/// Partial renewal sum `sum_{1 <= n <= N} f^{*n}` on a window by doubling.
fn partial_sum(base: &WalkPmf, n_max: u64, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    let mut g: Option<WalkPmf> = None;
    let mut p: Option<WalkPmf> = None;
    for bit in (0..64 - n_max.leading_zeros()).rev() {
        if let (Some(gv), Some(pv)) = (g.as_mut(), p.as_mut()) {
            let cross = convolve(pv, gv, window, budget)?;
            let mut g2 = gv.clone();
            add_into(&mut g2, &cross);
            let p2 = convolve(pv, pv, window, budget)?;
            *gv = g2;
            *pv = p2;
        }
        if (n_max >> bit) & 1 == 1 {
            match (g.as_mut(), p.as_mut()) {
                (None, None) => {
                    g = Some(base.clone().clip(window));
                    p = Some(base.clone().clip(window));
                }
                (Some(gv), Some(pv)) => {
                    let p1 = convolve(pv, base, window, budget)?;
                    add_into(gv, &p1);
                    *pv = p1;
                }
                _ => unreachable!(),
            }
        }
    }
    Ok(g.expect("n_max >= 1"))
}

/// `(x/A(x)) * sum_{1 <= n <= A(delta x)} P(S_n in x + I)`, exact.
pub fn small_n_sum(law: &LatticeLaw, x: f64, delta: f64, budget: &Budget) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParam(format!("delta = {delta} must lie in (0, 1]")));
    }
    let a = law
        .a_fn()
        .ok_or_else(|| Error::InvalidParam("small_n_sum needs a tail-index function".into()))?;
    let k_x = law.cell_of(x)?;
    if k_x < 1 {
        return Err(Error::InvalidParam("x must be at least h".into()));
    }
    let n_max = a.eval(delta * x).floor() as i64;
    if n_max < 1 {
        return Ok(0.0);
    }
    let window = small_n_window(law, k_x, budget)?;
    let base = law_base(law, window, budget)?;
    let g = partial_sum(&base, n_max as u64, window, budget)?;
    Ok(x / a.eval(x) * g.at_cell(k_x))
}

fn small_n_window(law: &LatticeLaw, k_x: i64, budget: &Budget) -> Result<(i64, i64)> {
    let window = if law.k_min() >= 0 {
        (0i64, k_x)
    } else {
        // leave room below zero for two-sided excursions
        let slack = (k_x / 2).max(1024);
        (-slack, k_x + slack / 4)
    };
    budget.check(window.1 - window.0 + 1, "small_n_sum")?;
    Ok(window)
}

/// Per-`n` contributions `P(S_n in x + I)` for `n = 1..=n_max`.
pub fn small_n_terms(law: &LatticeLaw, x: f64, n_max: u64, budget: &Budget) -> Result<Vec<f64>> {
    let k_x = law.cell_of(x)?;
    let window = small_n_window(law, k_x, budget)?;
    let base = law_base(law, window, budget)?;
    let mut out = Vec::with_capacity(n_max as usize);
    let mut cur = base.clone().clip(window);
    out.push(cur.at_cell(k_x));
    for _ in 1..n_max {
        cur = convolve(&cur, &base, window, budget)?;
        out.push(cur.at_cell(k_x));
    }
    Ok(out)
}

/// `P(S_n = kh, max_i X_i <= xi)` on a window: the law truncated at `xi`,
/// convolved with no renormalization.
pub fn restricted_walk_pmf(
    law: &LatticeLaw,
    n: u64,
    xi: f64,
    window: (i64, i64),
    budget: &Budget,
) -> Result<WalkPmf> {
    budget.check(window.1 - window.0 + 1, "restricted_walk_pmf")?;
    if n == 0 {
        return Ok(WalkPmf::delta(0, window));
    }
    let base = truncated_base(law, xi, window, budget)?;
    let mut out = pmf_power(&base, n, window, budget)?;
    // escape here includes the truncated mass; the values stay exact
    out.escaped_mass = out.escaped_mass.min(1.0);
    Ok(out)
}

fn truncated_base(law: &LatticeLaw, xi: f64, window: (i64, i64), budget: &Budget) -> Result<WalkPmf> {
    let mut base = law_base(law, window, budget)?;
    let xi_cell = (xi / law.h()).floor() as i64; // keep cells kh <= xi
    let hi_keep = xi_cell - base.k_lo + 1;
    if hi_keep < base.values.len() as i64 {
        for v in base.values.iter_mut().skip(hi_keep.max(0) as usize) {
            *v = 0.0;
        }
    }
    base.escaped_mass = (1.0 - base.mass()).max(0.0);
    Ok(base)
}

/// Exact decomposition of `P(S_n in x+I)` over the number of increments
/// exceeding `xi`.
#[derive(Clone, Debug)]
pub struct BigJumpDecomposition {
    /// `P(S_n in x+I, exactly k big jumps)` for `k = 0..=k_max`.
    pub components: Vec<f64>,
    /// `P(S_n in x+I, more than k_max big jumps)`.
    pub remainder: f64,
    pub total: f64,
    pub xi: f64,
}

fn binomial(n: u64, k: u64) -> f64 {
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

pub fn bigjump_decomposition(
    law: &LatticeLaw,
    n: u64,
    x: f64,
    xi: f64,
    k_max: u64,
    budget: &Budget,
) -> Result<BigJumpDecomposition> {
    if n == 0 {
        return Err(Error::InvalidParam("walk length must be positive".into()));
    }
    let k_x = law.cell_of(x)?;
    let window = small_n_window(law, k_x, budget)?;
    let k_max = k_max.min(n);
    let total = walk_pmf(law, n, window, budget)?.at_cell(k_x);

    let small = truncated_base(law, xi, window, budget)?;
    let mut big = law_base(law, window, budget)?;
    let xi_cell = (xi / law.h()).floor() as i64;
    for (i, v) in big.values.iter_mut().enumerate() {
        if big.k_lo + i as i64 <= xi_cell {
            *v = 0.0;
        }
    }

    let mut components = Vec::with_capacity(k_max as usize + 1);
    for k in 0..=k_max {
        let value = if k > n {
            0.0
        } else {
            let small_part = if n - k >= 1 {
                Some(pmf_power(&small, n - k, window, budget)?)
            } else {
                None
            };
            let big_part = if k >= 1 {
                Some(pmf_power(&big, k, window, budget)?)
            } else {
                None
            };
            let cell_value = match (&small_part, &big_part) {
                (Some(s), Some(b)) => {
                    let mut acc = KahanSum::new();
                    for (i, &bv) in b.values.iter().enumerate() {
                        if bv == 0.0 {
                            continue;
                        }
                        let kb = b.k_lo + i as i64;
                        acc.add(bv * s.at_cell(k_x - kb));
                    }
                    acc.value()
                }
                (Some(s), None) => s.at_cell(k_x),
                (None, Some(b)) => b.at_cell(k_x),
                (None, None) => 0.0,
            };
            binomial(n, k) * cell_value
        };
        components.push(value);
    }
    let sum: f64 = components.iter().sum();
    let remainder = total - sum;
    if remainder < -1e-10 {
        return Err(Error::Invariant(format!(
            "big-jump components exceed the total by {:.3e}",
            -remainder
        )));
    }
    Ok(BigJumpDecomposition { components, remainder: remainder.max(0.0), total, xi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::make_pareto_lattice;
    use crate::regvar::{SlowlyVarying, TailIndexFn};

    fn budget() -> Budget {
        Budget::default()
    }

    fn law_from(h: f64, k_min: i64, pmf: Vec<f64>) -> LatticeLaw {
        LatticeLaw::from_table(h, k_min, pmf).unwrap()
    }

    #[test]
    fn convolve_identity_and_shift() {
        let w = (0i64, 16i64);
        let delta0 = WalkPmf::delta(0, w);
        let p = WalkPmf { n: 1, k_lo: 0, values: vec![0.0, 0.25, 0.75], escaped_mass: 0.0, dust: 0.0 };
        let out = convolve(&delta0, &p, w, &budget()).unwrap();
        for k in 0..=4 {
            assert!((out.at_cell(k) - p.at_cell(k)).abs() < 1e-15);
        }
        let d1 = WalkPmf::delta(1, w);
        let out = convolve(&d1, &d1, w, &budget()).unwrap();
        assert_eq!(out.at_cell(2), 1.0);
        assert_eq!(out.mass(), 1.0);
    }

    #[test]
    fn convolve_hand_expansion() {
        // (1/2 d1 + 1/2 d2)^2 = (1/4, 1/2, 1/4) on {2,3,4}
        let law = law_from(1.0, 1, vec![0.5, 0.5]);
        let out = walk_pmf(&law, 2, (0, 8), &budget()).unwrap();
        assert!((out.at_cell(2) - 0.25).abs() < 1e-15);
        assert!((out.at_cell(3) - 0.5).abs() < 1e-15);
        assert!((out.at_cell(4) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn walk_pmf_degenerate_cases() {
        let law = law_from(1.0, 1, vec![1.0]);
        let out = walk_pmf(&law, 0, (0, 10), &budget()).unwrap();
        assert_eq!(out.at_cell(0), 1.0);
        let out = walk_pmf(&law, 1, (0, 10), &budget()).unwrap();
        assert_eq!(out.at_cell(1), 1.0);
        let out = walk_pmf(&law, 7, (0, 10), &budget()).unwrap();
        assert_eq!(out.at_cell(7), 1.0);
        assert_eq!(out.mass(), 1.0);
    }

    #[test]
    fn walk_pmf_budget_error() {
        let law = law_from(1.0, 1, vec![1.0]);
        let b = Budget::with_max_cells(4);
        assert!(matches!(walk_pmf(&law, 2, (0, 100), &b), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn renewal_deterministic() {
        let law = law_from(1.0, 1, vec![1.0]);
        let t = renewal_measure_onesided(&law, 32, RenewalMethod::Recursion).unwrap();
        for k in 0..=32 {
            assert!((t.u_cell(k) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn renewal_half_half() {
        let law = law_from(1.0, 1, vec![0.5, 0.5]);
        let t = renewal_measure_onesided(&law, 64, RenewalMethod::Recursion).unwrap();
        let expect = [1.0, 0.5, 0.75, 0.625, 0.6875];
        for (k, &e) in expect.iter().enumerate() {
            assert!((t.u_cell(k as i64) - e).abs() < 1e-12);
        }
        // mean 3/2, limit 2/3
        assert!((t.u_cell(64) - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn renewal_with_mass_at_zero() {
        // f(0) = f(1) = 1/2: u(k) = 2 for every k >= 0
        let law = law_from(1.0, 0, vec![0.5, 0.5]);
        let t = renewal_measure_onesided(&law, 20, RenewalMethod::Recursion).unwrap();
        for k in 0..=20 {
            assert!((t.u_cell(k) - 2.0).abs() < 1e-12, "u({k}) = {}", t.u_cell(k));
        }
        let s = renewal_measure_onesided(&law, 20, RenewalMethod::SeriesReciprocal).unwrap();
        for k in 0..=20 {
            assert!((s.u_cell(k) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn series_matches_recursion_on_random_laws() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10 {
            let len = rng.random_range(2..40);
            let mut pmf: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
            let support_at_one = rng.random::<bool>();
            let k_min = if support_at_one { 1 } else { 0 };
            if k_min == 0 {
                pmf[0] = pmf[0].min(0.8);
            }
            let total: f64 = pmf.iter().sum();
            for v in pmf.iter_mut() {
                *v /= total;
            }
            let law = law_from(1.0, k_min, pmf);
            let a = renewal_measure_onesided(&law, 2048, RenewalMethod::Recursion).unwrap();
            let b = renewal_measure_onesided(&law, 2048, RenewalMethod::SeriesReciprocal).unwrap();
            let max_abs = a
                .u
                .iter()
                .zip(&b.u)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_abs < 1e-9, "paths disagree by {max_abs}");
        }
    }

    #[test]
    fn enumeration_oracle_agrees() {
        let law = law_from(1.0, 1, vec![0.3, 0.25, 0.25, 0.2]);
        let t = renewal_measure_onesided(&law, 64, RenewalMethod::Recursion).unwrap();
        let oracle = renewal_enumeration_oracle(&law, 64, &budget()).unwrap();
        for k in 0..=64usize {
            assert!((t.u[k] - oracle[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn twosided_matches_onesided_on_positive_law() {
        let a = TailIndexFn::new(0.5, SlowlyVarying::Constant(1.0)).unwrap();
        let law = make_pareto_lattice(a, 1.0, 512).unwrap();
        let one = renewal_measure_onesided(&law, 128, RenewalMethod::Recursion).unwrap();
        let two = renewal_measure_twosided(&law, (0, 128), 4096, &budget(), None).unwrap();
        for k in 0..=64i64 {
            let diff = (one.u_cell(k) - two.u_cell(k)).abs();
            assert!(
                diff < 1e-9 + two.truncation_error.unwrap(),
                "u({k}) differs by {diff}"
            );
        }
    }

    #[test]
    fn twosided_remainder_scale() {
        let a = TailIndexFn::new(0.4, SlowlyVarying::Constant(1.0)).unwrap();
        let law = make_pareto_lattice(a, 1.0, 512).unwrap();
        // sum_{n > 1e4} n^{-2.5} = 6.67e-7 by integral comparison
        let tail = a_n_tail_sum(&law, 10_000).unwrap();
        assert!((tail / 6.667e-7 - 1.0).abs() < 0.01, "tail = {tail:.4e}");
    }

    #[test]
    fn restricted_examples() {
        // xi below the minimal support kills all mass for n >= 1
        let law = law_from(1.0, 2, vec![0.5, 0.0, 0.5]);
        let out = restricted_walk_pmf(&law, 2, 1.0, (0, 16), &budget()).unwrap();
        assert_eq!(out.mass(), 0.0);
        // xi at the window top leaves the law untouched
        let full = walk_pmf(&law, 2, (0, 16), &budget()).unwrap();
        let same = restricted_walk_pmf(&law, 2, 16.0, (0, 16), &budget()).unwrap();
        for k in 0..=16 {
            assert!((full.at_cell(k) - same.at_cell(k)).abs() < 1e-15);
        }
        // f(1) = f(3) = 1/2, n = 2, xi = 2: only 1+1 survives
        let law = law_from(1.0, 1, vec![0.5, 0.0, 0.5]);
        let out = restricted_walk_pmf(&law, 2, 2.0, (0, 16), &budget()).unwrap();
        assert!((out.at_cell(2) - 0.25).abs() < 1e-15);
        assert_eq!(out.at_cell(4), 0.0);
        assert_eq!(out.at_cell(6), 0.0);
    }

    #[test]
    fn bigjump_hand_case() {
        // f(1) = f(10) = 1/2, n = 2, x = 11, xi = 5
        let mut pmf = vec![0.0; 10];
        pmf[0] = 0.5;
        pmf[9] = 0.5;
        let law = law_from(1.0, 1, pmf);
        let d = bigjump_decomposition(&law, 2, 11.0, 5.0, 2, &budget()).unwrap();
        assert!((d.components[1] - 0.5).abs() < 1e-14);
        assert!(d.components[0].abs() < 1e-14);
        assert!(d.components[2].abs() < 1e-14);
        assert!((d.total - 0.5).abs() < 1e-14);
        assert!(d.remainder.abs() < 1e-12);
    }

    #[test]
    fn bigjump_single_step() {
        let law = law_from(1.0, 1, vec![0.25, 0.25, 0.5]);
        // n = 1: the single increment is a big jump iff x > xi
        let d = bigjump_decomposition(&law, 1, 3.0, 2.5, 1, &budget()).unwrap();
        assert!((d.components[1] - 0.5).abs() < 1e-14);
        assert_eq!(d.components[0], 0.0);
        let d = bigjump_decomposition(&law, 1, 2.0, 2.5, 1, &budget()).unwrap();
        assert!((d.components[0] - 0.25).abs() < 1e-14);
        assert_eq!(d.components[1], 0.0);
    }

    #[test]
    fn bigjump_partition_identity() {
        let a = TailIndexFn::new(0.5, SlowlyVarying::Constant(1.0)).unwrap();
        let law = make_pareto_lattice(a, 1.0, 4096).unwrap();
        for &(n, x) in &[(4u64, 64.0), (9, 200.0), (16, 512.0)] {
            let d = bigjump_decomposition(&law, n, x, 24.0, 3, &budget()).unwrap();
            let total: f64 = d.components.iter().sum::<f64>() + d.remainder;
            assert!(
                (total - d.total).abs() < 1e-10,
                "partition off by {:.3e}",
                (total - d.total).abs()
            );
        }
    }

    #[test]
    fn small_n_sum_examples() {
        let a = TailIndexFn::new(0.7, SlowlyVarying::Constant(1.0)).unwrap();
        // deterministic f(1) = 1 with an attached index function:
        let law = law_from(1.0, 1, vec![1.0]).with_a(a.clone());
        // A(0.9*5) ~ 4.5^0.7 ~ 2.87 < 5: empty hit set until n = 5
        let v = small_n_sum(&law, 5.0, 0.9, &budget()).unwrap();
        assert_eq!(v, 0.0);
        // delta = 1: A(5) ~ 3.08 < 5 still zero; stretch x instead
        let v = small_n_sum(&law, 3.0, 1.0, &budget()).unwrap();
        // A(3) = 2.16 -> n_max = 2 < 3, still zero
        assert_eq!(v, 0.0);
        let v = small_n_sum(&law, 2.0, 1.0, &budget()).unwrap();
        // n_max = floor(A(2)) = 1; P(S_1 = 2) = 0
        assert_eq!(v, 0.0);
        // tiny delta makes the range empty
        let pareto = make_pareto_lattice(a.clone(), 1.0, 1 << 12).unwrap();
        let v = small_n_sum(&pareto, 1024.0, 1e-4, &budget()).unwrap();
        assert_eq!(v, 0.0);
        // engine self-consistency: partial sums match per-n terms
        let x = 512.0;
        let n_max = a.eval(0.5 * x).floor() as u64;
        let terms = small_n_terms(&pareto, x, n_max, &budget()).unwrap();
        let direct: f64 = terms.iter().sum::<f64>() * (x / a.eval(x));
        let fast = small_n_sum(&pareto, x, 0.5, &budget()).unwrap();
        assert!((fast - direct).abs() < 1e-12);
    }

    #[test]
    fn small_n_sum_decreases_in_delta() {
        let a = TailIndexFn::new(0.7, SlowlyVarying::Constant(1.0)).unwrap();
        let law = make_pareto_lattice(a, 1.0, 1 << 13).unwrap();
        let x = 4096.0;
        let mut last = f64::INFINITY;
        for &d in &[0.4, 0.2, 0.1] {
            let v = small_n_sum(&law, x, d, &budget()).unwrap();
            assert!(v < last, "not decreasing at delta = {d}");
            last = v;
        }
    }
}
