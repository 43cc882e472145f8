use rand_distr::{Distribution, StandardNormal};

use super::{attack_loss, attack_loss_grad, build_variant, norm2, AttackConfig, AttackResult, Objective, TraceRow, VariantSpec};
use crate::estimation::bdd_statistic;
use crate::fdia::FdiaSpec;
use crate::gridcase::GridModel;
use crate::neural::{labels_from_logits, Adam, Mode, NalModel};
use crate::rng::stream;
use crate::{Error, Result};

/// `tanh` of anything larger rounds to 1.0 and would put `zeta` on the box
/// boundary.
const TANH_ARG_LIMIT: f64 = 18.0;

fn bounded_tanh(w: f64) -> f64 {
    w.clamp(-TANH_ARG_LIMIT, TANH_ARG_LIMIT).tanh()
}

/// The composite map `w -> loss(Y(z_a + P H (I * mu * tanh(w))))` for one
/// attacked sample, where `P` zeroes uncontrolled meters.
pub struct AttackProblem<'a> {
    pub model: &'a NalModel,
    pub grid: &'a GridModel,
    pub z_a: &'a [f64],
    pub spec: VariantSpec,
    pub mu: f64,
    pub objective: Objective,
    controlled: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// `d loss / d w`; absent when not requested or when the labels already
    /// satisfy the constraints.
    pub grad: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub labels: Vec<u8>,
    pub zeta: Vec<f64>,
    pub h_zeta: Vec<f64>,
    pub theta: Vec<f64>,
    pub z_f: Vec<f64>,
}

impl<'a> AttackProblem<'a> {
    pub fn new(
        model: &'a NalModel,
        grid: &'a GridModel,
        z_a: &'a [f64],
        fdia: &FdiaSpec,
        config: &AttackConfig,
    ) -> Result<Self> {
        config.validate()?;
        let m = grid.n_meters();
        if z_a.len() != m || model.n_meters() != m || fdia.a.len() != m || fdia.c.len() != grid.n_state {
            return Err(Error::Shape(format!(
                "attack inputs disagree: grid has {m} meters / {} states, model {}, z_a {}, a {}, c {}",
                grid.n_state,
                model.n_meters(),
                z_a.len(),
                fdia.a.len(),
                fdia.c.len()
            )));
        }
        let spec = build_variant(config.variant, fdia, &config.set_a)?;
        let mut controlled = vec![true; m];
        for &j in &config.uncontrolled_meters {
            *controlled
                .get_mut(j)
                .ok_or_else(|| Error::Precondition(format!("uncontrolled meter {j} out of range")))? =
                false;
        }
        Ok(AttackProblem {
            model,
            grid,
            z_a,
            spec,
            mu: config.mu,
            objective: config.objective,
            controlled,
        })
    }

    pub fn n_state(&self) -> usize {
        self.grid.n_state
    }

    /// Returns `(zeta, H zeta, theta, z_f)`.
    pub fn perturb(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let zeta: Vec<f64> = w
            .iter()
            .zip(&self.spec.mask)
            .map(|(w, i)| i * self.mu * bounded_tanh(*w))
            .collect();
        let h_zeta = self.grid.measure(&zeta);
        let theta: Vec<f64> = h_zeta
            .iter()
            .zip(&self.controlled)
            .map(|(v, c)| if *c { *v } else { 0.0 })
            .collect();
        let z_f = self.z_a.iter().zip(&theta).map(|(z, t)| z + t).collect();
        (zeta, h_zeta, theta, z_f)
    }

    pub fn evaluate(&self, w: &[f64], with_grad: bool) -> Result<Evaluation> {
        let (zeta, h_zeta, theta, z_f) = self.perturb(w);
        let pass = self.model.forward_batch(&z_f, Mode::Eval)?;
        let logits = pass.logits.clone();
        let labels = labels_from_logits(&logits);
        let loss = attack_loss(&logits, &self.spec, self.objective, &zeta);
        let grad = if with_grad && !self.spec.satisfied_by(&labels) {
            let (dlogits, dzeta_pen) = attack_loss_grad(&logits, &self.spec, self.objective, &zeta);
            let (_, dz) = self.model.backward_batch(&pass, &dlogits, false, true)?;
            let dtheta: Vec<f64> = dz
                .expect("input gradient requested")
                .iter()
                .zip(&self.controlled)
                .map(|(d, c)| if *c { *d } else { 0.0 })
                .collect();
            let dzeta = self.grid.measure_transpose(&dtheta);
            Some(
                w.iter()
                    .enumerate()
                    .map(|(i, wi)| {
                        let t = bounded_tanh(*wi);
                        (dzeta[i] + dzeta_pen[i]) * self.spec.mask[i] * self.mu * (1.0 - t * t)
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(Evaluation {
            loss,
            grad,
            logits,
            labels,
            zeta,
            h_zeta,
            theta,
            z_f,
        })
    }
}

fn finish(
    grid: &GridModel,
    e: Evaluation,
    success: bool,
    iterations_used: usize,
    trace: Vec<TraceRow>,
) -> Result<AttackResult> {
    Ok(AttackResult {
        success,
        iterations_used,
        zeta_norm: norm2(&e.zeta),
        theta_norm: norm2(&e.theta),
        h_zeta_norm: norm2(&e.h_zeta),
        bdd_statistic_final: bdd_statistic(grid, &e.z_f)?,
        loss: e.loss,
        zeta: e.zeta,
        theta: e.theta,
        z_f: e.z_f,
        predicted_labels: e.labels,
        trace,
    })
}

/// Search for a perturbation that satisfies the variant's label constraints.
///
/// The constraints are checked before every Adam step, so a sample that
/// already satisfies them returns at iteration 0 with `zeta = 0`. When the
/// budget runs out, the lowest-loss iterate is returned with `success = false`.
pub fn run_attack(
    model: &NalModel,
    grid: &GridModel,
    z_a: &[f64],
    fdia: &FdiaSpec,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if model.mode != Mode::Eval {
        return Err(Error::Precondition("attacks need an eval-mode model".into()));
    }
    grid.require_noise_sigma()?;
    let problem = AttackProblem::new(model, grid, z_a, fdia, config)?;
    let n = problem.n_state();
    let mut trace = Vec::new();
    let mut best: Option<Evaluation> = None;
    let mut used = 0usize;

    for start in 0..=config.restarts {
        let mut w = if start == 0 {
            vec![0.0; n]
        } else {
            let mut rng = stream(config.seed, "attack-restart", start as u64);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let mut adam = Adam::new(config.lr, &[n]);
        for k in 0..=config.max_iter {
            let e = problem.evaluate(&w, k < config.max_iter)?;
            if !e.loss.is_finite() {
                return Err(Error::Numeric {
                    location: format!("attack iteration {}", used + k),
                    msg: "loss is not finite".into(),
                });
            }
            let success = problem.spec.satisfied_by(&e.labels);
            if config.record_trace {
                trace.push(TraceRow {
                    iteration: used + k,
                    loss: e.loss,
                    bdd_statistic: bdd_statistic(grid, &e.z_f)?,
                    n_violated_labels: problem.spec.violations(&e.labels),
                });
            }
            if success {
                return finish(grid, e, true, used + k, trace);
            }
            let grad = e.grad.clone();
            if best.as_ref().map_or(true, |b| e.loss < b.loss) {
                best = Some(e);
            }
            match grad {
                Some(g) => adam.update_one(&mut w, &g),
                None => break,
            }
        }
        used += config.max_iter;
    }
    finish(grid, best.expect("at least one iterate"), false, used, trace)
}
