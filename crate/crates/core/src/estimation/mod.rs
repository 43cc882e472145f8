//! Weighted-least-squares state estimation and the chi-square bad-data test.

mod chi2;
mod wls;

pub use chi2::{chi_square_cdf, chi_square_threshold, ln_gamma, regularized_lower_gamma};
pub use wls::{bdd_detect, bdd_statistic, residual, wls_estimate, EstimationResult, WlsFactor};

/// Significance used when the caller does not choose one.
pub const DEFAULT_SIGNIFICANCE: f64 = 0.99;
