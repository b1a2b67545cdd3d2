//! Heavy-tailed spectral diagnostics for weight matrices and module-wise
//! weight decay scheduling driven by them.
//!
//! - [`tensor_io`]: checkpoint container and module naming.
//! - [`spectral`]: empirical spectral densities, Hill tail exponents, norms.
//! - [`schedule`]: decay assignment functions and the periodic scheduler.
//! - [`train`]: a small deterministic decoder-only transformer trainer.
//! - [`cli`]: the `htsr` command-line front end.

pub mod spectral;
pub mod tensor_io;
pub mod schedule;
pub mod train;
pub mod cli;

/// Decimal with 17 significant digits: enough to round-trip any f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
