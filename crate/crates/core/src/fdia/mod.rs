//! Stealthy attack vectors `a = H c` and synthetic measurement data.

mod dataset;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, DatasetMeta,
    LabeledSample,
};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gridcase::GridModel;
use crate::{Error, Result};

/// Entries of `a` at or below this magnitude are structural zeros.
pub const LABEL_EPSILON: f64 = 1e-8;
/// Lower bound on calibrated meter standard deviations (p.u.).
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Noise standard deviation as a fraction of the mean absolute reading.
pub const NOISE_FRACTION: f64 = 0.02;
pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// The three attack magnitudes (variance of the targeted state errors).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackScale {
    Small,
    Medium,
    Large,
}

impl AttackScale {
    pub const ALL: [AttackScale; 3] = [AttackScale::Small, AttackScale::Medium, AttackScale::Large];

    pub fn variance(self) -> f64 {
        match self {
            AttackScale::Small => 0.02,
            AttackScale::Medium => 0.1,
            AttackScale::Large => 0.5,
        }
    }

    pub fn from_variance(v: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.variance() == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackScale::Small => "small",
            AttackScale::Medium => "medium",
            AttackScale::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Some(AttackScale::Small),
            "medium" => Some(AttackScale::Medium),
            "large" => Some(AttackScale::Large),
            other => other.parse::<f64>().ok().and_then(Self::from_variance),
        }
    }
}

/// A stealthy false-data injection: state error `c` and its footprint `a = H c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdiaSpec {
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub target_indices: Vec<usize>,
    pub scale_variance: f64,
}

impl FdiaSpec {
    /// Build from a state-error vector, recomputing `a` and the targets.
    pub fn from_state_error(grid: &GridModel, c: Vec<f64>, scale_variance: f64) -> Self {
        let a = grid.measure(&c);
        let target_indices = c
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        FdiaSpec {
            c,
            a,
            target_indices,
            scale_variance,
        }
    }

    /// Meters carrying a nonzero share of the attack.
    pub fn attacked_meters(&self) -> Vec<usize> {
        labels_from_attack(&self.a, LABEL_EPSILON)
            .iter()
            .enumerate()
            .filter(|(_, y)| **y == 1)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Draw per-bus loads in `[0.8, 1.2] x base` and solve the DC flow for the
/// bus angles. Returns `(loads, state)`.
pub fn sample_state<R: Rng + ?Sized>(grid: &GridModel, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let loads: Vec<f64> = grid
        .base_loads
        .iter()
        .map(|base| base * (0.8 + 0.4 * rng.random::<f64>()))
        .collect();
    let injections: Vec<f64> = loads.iter().map(|l| -l).collect();
    let state = grid.solve_dc_flow(&injections);
    (loads, state)
}

/// `z = H x + e`, `e_i ~ N(0, sigma_i^2)`.
pub fn make_measurements<R: Rng + ?Sized>(
    grid: &GridModel,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sigma = grid.require_noise_sigma()?;
    Ok(add_noise(grid.measure(x), sigma, rng))
}

pub fn add_noise<R: Rng + ?Sized>(mut z: Vec<f64>, sigma: &[f64], rng: &mut R) -> Vec<f64> {
    for (zi, s) in z.iter_mut().zip(sigma) {
        let e: f64 = rng.sample(StandardNormal);
        *zi += s * e;
    }
    z
}

/// Per-meter sigma from noise-free readings: `max(0.02 * mean|z_i|, floor)`.
pub fn calibrate_sigma(grid: &GridModel, noise_free: &[Vec<f64>]) -> Result<Vec<f64>> {
    if noise_free.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::Precondition(format!(
            "noise calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {}",
            noise_free.len()
        )));
    }
    let m = grid.n_meters();
    let mut acc = vec![0.0; m];
    for z in noise_free {
        if z.len() != m {
            return Err(Error::Shape(format!("sample of length {} for {m} meters", z.len())));
        }
        for (a, v) in acc.iter_mut().zip(z) {
            *a += v.abs();
        }
    }
    let count = noise_free.len() as f64;
    Ok(acc
        .into_iter()
        .map(|s| (NOISE_FRACTION * s / count).max(SIGMA_FLOOR))
        .collect())
}

/// Calibrate and install `noise_sigma`, returning the updated grid.
pub fn calibrate_noise(grid: &GridModel, noise_free: &[Vec<f64>]) -> Result<GridModel> {
    let sigma = calibrate_sigma(grid, noise_free)?;
    grid.clone().with_noise_sigma(sigma)
}

/// Draw `count` noise-free readings from the load model and calibrate.
pub fn calibrate_from_load_model<R: Rng + ?Sized>(
    grid: &GridModel,
    count: usize,
    rng: &mut R,
) -> Result<GridModel> {
    let pool: Vec<Vec<f64>> = (0..count)
        .map(|_| grid.measure(&sample_state(grid, rng).1))
        .collect();
    calibrate_noise(grid, &pool)
}

/// Random stealthy attack: `k ~ U{1..floor(n/2)}` distinct targets, each
/// `c_i ~ N(0, nu^2)`, and `a = H c`.
pub fn random_fdia<R: Rng + ?Sized>(
    grid: &GridModel,
    scale_variance: f64,
    rng: &mut R,
) -> Result<FdiaSpec> {
    let n = grid.n_state;
    if n < 2 {
        return Err(Error::Precondition("random_fdia needs at least two states".into()));
    }
    if !(scale_variance > 0.0) || !scale_variance.is_finite() {
        return Err(Error::Precondition(format!(
            "scale variance must be positive, got {scale_variance}"
        )));
    }
    let nu = scale_variance.sqrt();
    let k = rng.random_range(1..=n / 2);
    let mut targets = sample_indices(rng, n, k).into_vec();
    targets.sort_unstable();
    let mut c = vec![0.0; n];
    for &t in &targets {
        loop {
            let draw: f64 = rng.sample(StandardNormal);
            let v = nu * draw;
            if v != 0.0 {
                c[t] = v;
                break;
            }
        }
    }
    Ok(FdiaSpec::from_state_error(grid, c, scale_variance))
}

/// `y_j = [|a_j| > epsilon]`.
pub fn labels_from_attack(a: &[f64], label_epsilon: f64) -> Vec<u8> {
    a.iter().map(|v| u8::from(v.abs() > label_epsilon)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcase::{build_grid_model, parse_matpower_case, MeterConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_bus(loads: (f64, f64)) -> GridModel {
        let text = format!(
            "mpc.baseMVA = 100;\nmpc.bus = [1 3 0; 2 1 {}; 3 1 {}];\nmpc.branch = [1 2 0 0.1; 2 3 0 0.1];\n",
            loads.0, loads.1
        );
        build_grid_model(&parse_matpower_case(&text).unwrap(), MeterConfig::default()).unwrap()
    }

    #[test]
    fn zero_base_loads_give_zero_state() {
        let g = three_bus((0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (loads, x) = sample_state(&g, &mut rng);
        assert!(loads.iter().all(|l| *l == 0.0));
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampled_state_solves_the_dc_system() {
        let g = three_bus((50.0, 30.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (loads, x) = sample_state(&g, &mut rng);
        assert!(loads[1] >= 0.4 && loads[1] <= 0.6);
        // Direct 2x2 solve of [[20,-10],[-10,10]] theta = -(l2, l3).
        let (p2, p3) = (-loads[1], -loads[2]);
        let t2 = (p2 * 10.0 - (-10.0) * p3) / 100.0;
        let t3 = (20.0 * p3 - (-10.0) * p2) / 100.0;
        assert!((x[0] - t2).abs() < 1e-15 && (x[1] - t3).abs() < 1e-15);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let g = three_bus((50.0, 30.0));
        let a = sample_state(&g, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_state(&g, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_gives_exact_readings() {
        let g = three_bus((50.0, 30.0));
        let hx = g.measure(&[0.01, 0.02]);
        let z = add_noise(hx.clone(), &[0.0; 5], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(z, hx);
    }

    #[test]
    fn calibration_rules() {
        let g = three_bus((50.0, 30.0));
        let pool: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s, 0.0, 1.0, 2.0, -3.0]
            })
            .collect();
        let sigma = calibrate_sigma(&g, &pool).unwrap();
        assert_eq!(sigma[0], 0.02);
        assert_eq!(sigma[1], SIGMA_FLOOR);
        assert!((sigma[4] - 0.06).abs() < 1e-15);
        assert!(calibrate_sigma(&g, &pool[..99]).is_err());
    }

    #[test]
    fn labels_follow_support() {
        assert_eq!(labels_from_attack(&[0.0, 0.0], LABEL_EPSILON), vec![0, 0]);
        // c = (0.01, 0.01) on the 3-bus grid: flows (-0.1, 0), injections (-0.1, 0.1, 0).
        let g = three_bus((50.0, 30.0));
        let a = g.measure(&[0.01, 0.01]);
        assert_eq!(labels_from_attack(&a[..3], LABEL_EPSILON), vec![1, 0, 1]);
        assert_eq!(labels_from_attack(&[0.1, -0.1, 0.0], LABEL_EPSILON), vec![1, 1, 0]);
        assert_eq!(labels_from_attack(&[5.0, -1.0], f64::INFINITY), vec![0, 0]);
    }

    #[test]
    fn zero_variance_is_rejected() {
        let g = three_bus((50.0, 30.0));
        assert!(matches!(
            random_fdia(&g, 0.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fdia_invariants_hold() {
        let g = three_bus((50.0, 30.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let f = random_fdia(&g, 0.1, &mut rng).unwrap();
            assert_eq!(f.target_indices.len(), 1);
            assert_eq!(f.a, g.measure(&f.c));
        }
    }

    #[test]
    fn scale_names_round_trip() {
        for s in AttackScale::ALL {
            assert_eq!(AttackScale::parse(s.name()), Some(s));
            assert_eq!(AttackScale::from_variance(s.variance()), Some(s));
        }
        assert_eq!(AttackScale::parse("0.1"), Some(AttackScale::Medium));
        assert_eq!(AttackScale::parse("huge"), None);
    }
}
