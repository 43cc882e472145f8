use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chi2::chi_square_threshold;
use crate::gridcase::GridModel;
use crate::{Error, Result};

/// Cached estimator matrix `(H^T R^-1 H)^-1 H^T R^-1`, built from a QR
/// factorization of `R^-1/2 H` rather than the normal equations.
#[derive(Debug, Clone)]
pub struct WlsFactor {
    estimator: DMatrix<f64>,
}

impl WlsFactor {
    pub fn new(h: &DMatrix<f64>, sigma: &[f64]) -> Result<Self> {
        let (m, n) = h.shape();
        if m < n {
            return Err(Error::Observability(format!("{m} meters cannot observe {n} states")));
        }
        let mut weighted = h.clone();
        for (r, s) in sigma.iter().enumerate() {
            weighted.row_mut(r).scale_mut(1.0 / s);
        }
        let qr = weighted.qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if !(scale > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
            return Err(Error::Observability("weighted H does not have full column rank".into()));
        }
        let mut estimator = qr.q().transpose();
        for (c, s) in sigma.iter().enumerate() {
            estimator.column_mut(c).scale_mut(1.0 / s);
        }
        if !r.solve_upper_triangular_mut(&mut estimator) {
            return Err(Error::Observability("gain matrix H^T R^-1 H is singular".into()));
        }
        Ok(WlsFactor { estimator })
    }

    fn estimate(&self, z: &[f64]) -> Vec<f64> {
        (&self.estimator * DVector::from_column_slice(z)).as_slice().to_vec()
    }
}

/// Outcome of a bad-data check on one measurement vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub x_hat: Vec<f64>,
    pub residual: Vec<f64>,
    pub bdd_statistic: f64,
    pub threshold: f64,
    pub dof: usize,
    pub flagged: bool,
}

fn check_len(grid: &GridModel, z: &[f64]) -> Result<()> {
    if z.len() != grid.n_meters() {
        return Err(Error::Shape(format!(
            "measurement vector has length {}, grid has {} meters",
            z.len(),
            grid.n_meters()
        )));
    }
    Ok(())
}

/// `x_hat = (H^T R^-1 H)^-1 H^T R^-1 z`.
pub fn wls_estimate(grid: &GridModel, z: &[f64]) -> Result<Vec<f64>> {
    check_len(grid, z)?;
    Ok(grid.wls()?.estimate(z))
}

pub fn residual(grid: &GridModel, z: &[f64], x_hat: &[f64]) -> Vec<f64> {
    let hx = grid.measure(x_hat);
    z.iter().zip(hx).map(|(z, h)| z - h).collect()
}

fn weighted_square_sum(r: &[f64], sigma: &[f64]) -> f64 {
    r.iter().zip(sigma).map(|(r, s)| (r / s) * (r / s)).sum()
}

/// `L(x_hat) = sum_i ((z_i - H_i x_hat) / sigma_i)^2`.
pub fn bdd_statistic(grid: &GridModel, z: &[f64]) -> Result<f64> {
    let x_hat = wls_estimate(grid, z)?;
    let r = residual(grid, z, &x_hat);
    Ok(weighted_square_sum(&r, grid.require_noise_sigma()?))
}

/// Run the chi-square test with `m - n_state` degrees of freedom.
pub fn bdd_detect(grid: &GridModel, z: &[f64], significance: f64) -> Result<EstimationResult> {
    let x_hat = wls_estimate(grid, z)?;
    let r = residual(grid, z, &x_hat);
    let stat = weighted_square_sum(&r, grid.require_noise_sigma()?);
    let dof = grid.n_meters().checked_sub(grid.n_state).filter(|d| *d >= 1).ok_or_else(|| {
        Error::Precondition("bad-data test needs more meters than states".into())
    })?;
    let threshold = chi_square_threshold(dof, significance)?;
    Ok(EstimationResult {
        x_hat,
        residual: r,
        bdd_statistic: stat,
        threshold,
        dof,
        flagged: stat >= threshold,
    })
}
