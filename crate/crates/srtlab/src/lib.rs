//! Numerical laboratory for renewal measures of heavy-tailed lattice laws.
//!
//! The crate builds probability laws on a lattice `hZ` whose right tail is
//! asymptotically `1/A(x)` for a regularly varying `A(x) = x^alpha L(x)`
//! with `alpha` in `(0,1)`, computes their renewal measures exactly, and
//! evaluates the family of strong-renewal-theorem (SRT) criteria: the local
//! tail ratio `r`, its integrated cutoff version `R_T`, the Doney and Chi
//! sufficiency tests, the necessary-and-sufficient density/interval
//! diagnostics, their two-sided variant, and the `alpha = 1/2` dichotomy.
//!
//! Modules:
//! - [`regvar`]: regularly varying functions, inversion, Potter/Karamata checks
//! - [`dists`]: lattice law construction, including the counterexample families
//! - [`renewal`]: exact walk marginals, renewal tables, big-jump decompositions
//! - [`stable`]: one-sided stable densities and local-limit-theorem statistics
//! - [`criteria`]: SRT criteria on an `(eta, x)` grid with a trend classifier
//! - [`diag`]: top-level SRT ratios, big-jump parameters, lemma probes
//! - [`mc`]: Monte Carlo cross-checks with batch-means confidence intervals
//! - [`report`]: CSV/JSON/SVG emission and the on-disk renewal cache

pub mod criteria;
pub mod diag;
pub mod dists;
pub mod mc;
pub(crate) mod numeric;
pub mod regvar;
pub mod renewal;
pub mod report;
pub mod stable;

pub use dists::LatticeLaw;
pub use regvar::{SlowlyVarying, TailIndexFn};
pub use renewal::{Budget, RenewalTable, WalkPmf};

/// Errors shared by every module of the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("operation budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("query beyond support: {0}")]
    BeyondSupport(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
