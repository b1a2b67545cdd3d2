//! Empirical spectral densities and heavy-tail diagnostics.
//!
//! The ESD of a weight matrix `W` is the spectrum of `WᵀW`, obtained here as the
//! squared singular values of `W` so the condition number is never squared.
//! All arithmetic is f64 regardless of storage precision.
//!
//! The tail exponent is the Hill estimate over the `k` largest eigenvalues,
//!
//! ```text
//! alpha = 1 + k / Σ_{i=1..k} ln(λ_{n-i+1} / λ_{n-k})
//! ```
//!
//! with the eigenvalues sorted ascending and `λ_{n-k}` acting as `xmin`. How
//! `k` is chosen is governed by [`FitMethod`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{ModuleId, WeightMatrix};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const ZERO_EIGENVALUE_REL_TOL: f64 = 1e-12;

/// Mean log-ratio at or below which a tail counts as flat.
const DEGENERATE_MEAN_LOG_RATIO: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("empty matrix")]
    Empty,
    #[error("non-finite input value")]
    NonFinite,
    #[error("svd did not converge")]
    SvdNonConvergence,
    #[error("degenerate tail: the top {k} eigenvalues all equal the threshold {xmin}")]
    DegenerateTail { k: usize, xmin: f64 },
    #[error("nonpositive threshold: eigenvalue at the tail cutoff is {xmin} (largest is {max})")]
    NonpositiveThreshold { xmin: f64, max: f64 },
    #[error("tail too small: {0}")]
    TailTooSmall(String),
    #[error("k={k} is outside [1, {max}]")]
    InvalidK { k: usize, max: usize },
    #[error("gradient shape {grad:?} does not match weight shape {weight:?}")]
    ShapeMismatch { weight: (usize, usize), grad: (usize, usize) },
}

/// A spectral failure attributed to one module.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("module `{module}`: {source}")]
pub struct ModuleError {
    pub module: ModuleId,
    #[source]
    pub source: SpectralError,
}

/// Eigenvalues of `WᵀW`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    eigenvalues: Vec<f64>,
}

impl Esd {
    /// Sorts the input; rejects negative or non-finite values.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Result<Self, SpectralError> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::Empty);
        }
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpectralError::NonFinite);
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Esd { eigenvalues })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Upper end of the support. Carried for completeness: the Hill fit uses
    /// no upper truncation.
    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty")
    }

    pub fn scaled(&self, c: f64) -> Esd {
        Esd { eigenvalues: self.eigenvalues.iter().map(|v| v * c).collect() }
    }

    fn zero_cutoff(&self) -> f64 {
        self.lambda_max() * ZERO_EIGENVALUE_REL_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// `k = floor(n₊/2)`: the largest half of the nonzero spectrum.
    Median,
    /// `xmin` at the peak of the log-binned density.
    #[serde(rename = "fixfinger")]
    FixFinger,
    /// `xmin` minimizing the Kolmogorov–Smirnov distance to the fitted Pareto.
    #[serde(rename = "gof")]
    GoodnessOfFit,
}

impl FitMethod {
    pub const ALL: [FitMethod; 3] = [FitMethod::Median, FitMethod::FixFinger, FitMethod::GoodnessOfFit];

    pub fn as_str(self) -> &'static str {
        match self {
            FitMethod::Median => "median",
            FitMethod::FixFinger => "fixfinger",
            FitMethod::GoodnessOfFit => "gof",
        }
    }
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(FitMethod::Median),
            "fixfinger" => Ok(FitMethod::FixFinger),
            "gof" => Ok(FitMethod::GoodnessOfFit),
            other => Err(format!("unknown fit method `{other}` (expected median, fixfinger or gof)")),
        }
    }
}

/// Tuning knobs for the xmin searches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub fixfinger_bins: usize,
    pub gof_max_candidates: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { fixfinger_bins: 100, gof_max_candidates: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillFit {
    pub alpha: f64,
    pub k: usize,
    pub xmin: f64,
    /// `None` when `k` was supplied directly rather than selected.
    pub method: Option<FitMethod>,
}

/// Tail size chosen by a [`FitMethod`] and the threshold it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSelection {
    pub k: usize,
    pub xmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub module: ModuleId,
    pub alpha: HillFit,
    pub spectral_norm: f64,
    pub frobenius_norm: f64,
    pub grad_norm: Option<f64>,
}

fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>, SpectralError> {
    if rows == 0 || cols == 0 {
        return Err(SpectralError::Empty);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let mut m = DMatrix::from_row_slice(rows, cols, data);
    if rows > cols {
        m = m.transpose();
    }
    let max_iter = 1000 * rows.max(cols);
    let svd = SVD::try_new(m, false, false, f64::EPSILON, max_iter).ok_or(SpectralError::SvdNonConvergence)?;
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    if sv.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::SvdNonConvergence);
    }
    Ok(sv)
}

fn esd_from_singular_values(sv: &[f64]) -> Esd {
    let mut eigenvalues: Vec<f64> = sv.iter().map(|s| s * s).collect();
    eigenvalues.sort_by(f64::total_cmp);
    Esd { eigenvalues }
}

/// ESD of a row-major f64 matrix.
pub fn esd_of(rows: usize, cols: usize, data: &[f64]) -> Result<Esd, SpectralError> {
    Ok(esd_from_singular_values(&singular_values(rows, cols, data)?))
}

pub fn compute_esd(w: &WeightMatrix) -> Result<Esd, SpectralError> {
    esd_of(w.rows(), w.cols(), &w.to_f64())
}

pub fn spectral_norm(w: &WeightMatrix) -> Result<f64, SpectralError> {
    let sv = singular_values(w.rows(), w.cols(), &w.to_f64())?;
    Ok(sv.into_iter().fold(0.0, f64::max))
}

pub fn frobenius_norm(w: &WeightMatrix) -> f64 {
    frobenius_of(&w.to_f64())
}

pub(crate) fn frobenius_of(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Hill estimate over the `k` largest eigenvalues.
pub fn hill_alpha(esd: &Esd, k: usize) -> Result<HillFit, SpectralError> {
    let n = esd.len();
    if k == 0 || k >= n {
        return Err(SpectralError::InvalidK { k, max: n.saturating_sub(1) });
    }
    let lambda = esd.eigenvalues();
    let xmin = lambda[n - k - 1];
    if xmin <= 0.0 || xmin <= esd.zero_cutoff() {
        return Err(SpectralError::NonpositiveThreshold { xmin, max: esd.lambda_max() });
    }
    let log_sum: f64 = lambda[n - k..].iter().map(|v| (v / xmin).ln()).sum();
    if log_sum / k as f64 <= DEGENERATE_MEAN_LOG_RATIO {
        return Err(SpectralError::DegenerateTail { k, xmin });
    }
    Ok(HillFit { alpha: 1.0 + k as f64 / log_sum, k, xmin, method: None })
}

/// Chooses the tail size `k` for `method`.
pub fn select_k(esd: &Esd, method: FitMethod, cfg: &FitConfig) -> Result<TailSelection, SpectralError> {
    let n = esd.len();
    if n < 4 {
        return Err(SpectralError::TailTooSmall(format!("spectrum has {n} eigenvalues, need at least 4")));
    }
    let lambda = esd.eigenvalues();
    if lambda[0] == lambda[n - 1] {
        return Err(SpectralError::DegenerateTail { k: n / 2, xmin: lambda[0] });
    }
    let k = match method {
        // Half of the nonzero spectrum: zero eigenvalues of a rank-deficient
        // matrix carry no tail information and must not become the threshold.
        FitMethod::Median => {
            let cutoff = esd.zero_cutoff();
            lambda.iter().filter(|&&v| v > cutoff).count() / 2
        }
        FitMethod::FixFinger => fix_finger_k(esd, cfg.fixfinger_bins)?,
        FitMethod::GoodnessOfFit => goodness_of_fit_k(esd, cfg.gof_max_candidates)?,
    };
    if k < 2 {
        return Err(SpectralError::TailTooSmall(format!("{method} selected k={k}")));
    }
    Ok(TailSelection { k, xmin: lambda[n - k - 1] })
}

/// Log-binned histogram over the positive spectrum; `xmin` is the largest
/// eigenvalue in the densest bin (lowest bin on ties).
fn fix_finger_k(esd: &Esd, bins: usize) -> Result<usize, SpectralError> {
    let n = esd.len();
    let cutoff = esd.zero_cutoff();
    let positive: Vec<f64> = esd.eigenvalues().iter().copied().filter(|&v| v > cutoff).collect();
    if positive.len() < 3 {
        return Err(SpectralError::TailTooSmall(format!("only {} positive eigenvalues", positive.len())));
    }
    let lo = positive[0].ln();
    let hi = positive[positive.len() - 1].ln();
    if hi <= lo {
        return Err(SpectralError::DegenerateTail { k: positive.len() - 1, xmin: positive[0] });
    }
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| (((v.ln() - lo) / width) as usize).min(bins - 1);

    let mut counts = vec![0usize; bins];
    for &v in &positive {
        counts[bin_of(v)] += 1;
    }
    let peak = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    let xmin = positive.iter().copied().filter(|&v| bin_of(v) == peak).fold(f64::MIN, f64::max);
    let above = esd.eigenvalues().iter().filter(|&&v| v > xmin).count();
    Ok(above.clamp(2, n - 1))
}

/// Kolmogorov–Smirnov distance between the tail sample (ascending, all
/// `> xmin`) and the Pareto CDF with density exponent `alpha`.
pub fn ks_distance(tail: &[f64], xmin: f64, alpha: f64) -> f64 {
    let k = tail.len() as f64;
    tail.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let fitted = 1.0 - (x / xmin).powf(1.0 - alpha);
        let above = (i + 1) as f64 / k - fitted;
        let below = fitted - i as f64 / k;
        d.max(above).max(below)
    })
}

fn goodness_of_fit_k(esd: &Esd, max_candidates: usize) -> Result<usize, SpectralError> {
    let n = esd.len();
    let lambda = esd.eigenvalues();
    let cutoff = esd.zero_cutoff();
    // Candidate threshold indices j: xmin = λ[j] > 0, tail = λ[j+1..], k = n-1-j >= 2.
    let first = lambda.iter().position(|&v| v > cutoff).unwrap_or(n);
    if first + 2 >= n {
        return Err(SpectralError::TailTooSmall("no positive threshold leaves two tail samples".into()));
    }
    let last = n - 3;
    let span = last - first + 1;
    let cap = max_candidates.max(1);
    let mut candidates: Vec<usize> = if span <= cap {
        (first..=last).collect()
    } else if cap == 1 {
        vec![first]
    } else {
        (0..cap)
            .map(|i| first + ((i * (span - 1)) as f64 / (cap - 1) as f64).round() as usize)
            .collect()
    };
    candidates.dedup();

    let mut best: Option<(f64, usize)> = None;
    for j in candidates {
        let k = n - 1 - j;
        let fit = match hill_alpha(esd, k) {
            Ok(fit) => fit,
            Err(SpectralError::DegenerateTail { .. }) => continue,
            Err(e) => return Err(e),
        };
        let d = ks_distance(&lambda[j + 1..], fit.xmin, fit.alpha);
        let better = match best {
            None => true,
            Some((best_d, best_k)) => d < best_d || (d == best_d && k > best_k),
        };
        if better {
            best = Some((d, k));
        }
    }
    best.map(|(_, k)| k)
        .ok_or_else(|| SpectralError::DegenerateTail { k: n - 1 - first, xmin: lambda[first] })
}

/// Selects `k` with `method` and evaluates the Hill estimate there.
pub fn fit_alpha(esd: &Esd, method: FitMethod, cfg: &FitConfig) -> Result<HillFit, SpectralError> {
    let sel = select_k(esd, method, cfg)?;
    let mut fit = hill_alpha(esd, sel.k)?;
    fit.method = Some(method);
    Ok(fit)
}

/// Full diagnostic bundle for one module.
pub fn analyze_module(
    w: &WeightMatrix,
    grad: Option<&WeightMatrix>,
    method: FitMethod,
    cfg: &FitConfig,
) -> Result<SpectralReport, ModuleError> {
    let tag = |source| ModuleError { module: w.id.clone(), source };
    if let Some(g) = grad {
        if g.shape() != w.shape() {
            return Err(tag(SpectralError::ShapeMismatch { weight: w.shape(), grad: g.shape() }));
        }
    }
    let values = w.to_f64();
    let sv = singular_values(w.rows(), w.cols(), &values).map_err(tag)?;
    let esd = esd_from_singular_values(&sv);
    let alpha = fit_alpha(&esd, method, cfg).map_err(tag)?;
    Ok(SpectralReport {
        module: w.id.clone(),
        alpha,
        spectral_norm: sv.iter().copied().fold(0.0, f64::max),
        frobenius_norm: frobenius_of(&values),
        grad_norm: grad.map(frobenius_norm),
    })
}

/// Analyzes many modules, fanning out over at most `threads` workers.
/// Results come back in input order whatever the scheduling.
pub fn analyze_all(
    items: &[(&WeightMatrix, Option<&WeightMatrix>)],
    method: FitMethod,
    cfg: &FitConfig,
    threads: usize,
) -> Result<Vec<SpectralReport>, ModuleError> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|(w, g)| analyze_module(w, *g, method, cfg)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(|(w, g)| analyze_module(w, *g, method, cfg)).collect())
}
