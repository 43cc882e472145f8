//! Multi-label adversarial perturbations that hide an injection from both the
//! residual test and the neural locator.
//!
//! The search runs over an unconstrained vector `w`; the state perturbation is
//! `zeta = I * mu * tanh(w)` and the measurement perturbation `theta = H zeta`,
//! optionally zeroed on meters the attacker does not control.

mod engine;

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fdia::FdiaSpec;
use crate::{Error, Result};

pub use engine::{run_attack, AttackProblem, Evaluation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "lesson1")]
    Lesson1,
    #[serde(rename = "lesson2")]
    Lesson2,
    #[serde(rename = "lesson3")]
    Lesson3,
    #[serde(rename = "lesson4")]
    Lesson4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Lesson1,
        Variant::Lesson2,
        Variant::Lesson3,
        Variant::Lesson4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lesson1 => "lesson1",
            Variant::Lesson2 => "lesson2",
            Variant::Lesson3 => "lesson3",
            Variant::Lesson4 => "lesson4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        let s = s.strip_prefix("lesson").unwrap_or(&s).trim_start_matches(['-', '_']);
        match s {
            "1" => Some(Variant::Lesson1),
            "2" => Some(Variant::Lesson2),
            "3" => Some(Variant::Lesson3),
            "4" => Some(Variant::Lesson4),
            _ => None,
        }
    }

    /// Every meter must read "normal" (2, 4) rather than only the meters the
    /// injection touches (1, 3).
    pub fn hides_all_meters(self) -> bool {
        matches!(self, Variant::Lesson2 | Variant::Lesson4)
    }

    /// The perturbation may not move the targeted states (3, 4).
    pub fn is_targeted(self) -> bool {
        matches!(self, Variant::Lesson3 | Variant::Lesson4)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Label constraints and the free-state mask for one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    /// Meters that must be labelled attacked.
    pub set_a: Vec<usize>,
    /// Meters that must be labelled normal.
    pub set_b: Vec<usize>,
    /// 1 where the state may be perturbed, 0 where it is frozen.
    pub mask: Vec<f64>,
    pub require_targeted: bool,
}

impl VariantSpec {
    pub fn violations(&self, labels: &[u8]) -> usize {
        self.set_a.iter().filter(|i| labels[**i] != 1).count()
            + self.set_b.iter().filter(|j| labels[**j] != 0).count()
    }

    pub fn satisfied_by(&self, labels: &[u8]) -> bool {
        self.violations(labels) == 0
    }
}

pub fn build_variant(variant: Variant, fdia: &FdiaSpec, set_a: &[usize]) -> Result<VariantSpec> {
    let m = fdia.a.len();
    let set_b: Vec<usize> = if variant.hides_all_meters() {
        (0..m).collect()
    } else {
        fdia.attacked_meters()
    };
    let mut set_a: Vec<usize> = set_a.to_vec();
    set_a.sort_unstable();
    set_a.dedup();
    if let Some(bad) = set_a.iter().find(|i| **i >= m) {
        return Err(Error::Precondition(format!("meter {bad} is out of range")));
    }
    let overlap: Vec<usize> = set_a.iter().filter(|i| set_b.contains(i)).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Contradiction(overlap));
    }
    let mask = fdia
        .c
        .iter()
        .map(|c| if variant.is_targeted() && *c != 0.0 { 0.0 } else { 1.0 })
        .collect();
    Ok(VariantSpec {
        variant,
        set_a,
        set_b,
        mask,
        require_targeted: variant.is_targeted(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Objective {
    Hinge,
    /// Hinge plus `lambda * ||zeta||_2`.
    Penalty { lambda: f64 },
}

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub mu: f64,
    pub lr: f64,
    pub max_iter: usize,
    pub objective: Objective,
    pub uncontrolled_meters: Vec<usize>,
    pub set_a: Vec<usize>,
    pub seed: u64,
    /// Extra runs from random starting points after a failed zero start.
    pub restarts: usize,
    pub record_trace: bool,
}

impl AttackConfig {
    pub fn new(variant: Variant) -> Self {
        AttackConfig {
            variant,
            mu: 1.0,
            lr: 1e-3,
            max_iter: 500,
            objective: Objective::Hinge,
            uncontrolled_meters: Vec::new(),
            set_a: Vec::new(),
            seed: 0,
            restarts: 0,
            record_trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if let Objective::Penalty { lambda } = self.objective {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub bdd_statistic: f64,
    pub n_violated_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub iterations_used: usize,
    pub zeta: Vec<f64>,
    pub theta: Vec<f64>,
    pub z_f: Vec<f64>,
    pub predicted_labels: Vec<u8>,
    pub loss: f64,
    pub bdd_statistic_final: f64,
    pub zeta_norm: f64,
    pub theta_norm: f64,
    /// `||H zeta||_2`; differs from `theta_norm` only when meters are left
    /// uncontrolled.
    pub h_zeta_norm: f64,
    pub trace: Vec<TraceRow>,
}

/// Hinge loss over the label constraints, plus the norm penalty if asked.
pub fn attack_loss(logits: &[f64], spec: &VariantSpec, objective: Objective, zeta: &[f64]) -> f64 {
    let hinge: f64 = spec.set_a.iter().map(|i| (-logits[*i]).max(0.0)).sum::<f64>()
        + spec.set_b.iter().map(|j| logits[*j].max(0.0)).sum::<f64>();
    match objective {
        Objective::Hinge => hinge,
        Objective::Penalty { lambda } => hinge + lambda * norm2(zeta),
    }
}

/// Gradients of [`attack_loss`] with respect to the logits and to `zeta`.
pub(crate) fn attack_loss_grad(
    logits: &[f64],
    spec: &VariantSpec,
    objective: Objective,
    zeta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dl = vec![0.0; logits.len()];
    for &i in &spec.set_a {
        if logits[i] < 0.0 {
            dl[i] -= 1.0;
        }
    }
    for &j in &spec.set_b {
        if logits[j] > 0.0 {
            dl[j] += 1.0;
        }
    }
    let dz = match objective {
        Objective::Penalty { lambda } => {
            let n = norm2(zeta);
            if n > 0.0 {
                zeta.iter().map(|v| lambda * v / n).collect()
            } else {
                vec![0.0; zeta.len()]
            }
        }
        Objective::Hinge => vec![0.0; zeta.len()],
    };
    (dl, dz)
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMetrics {
    pub rho_c: Option<f64>,
    pub rho_a: Option<f64>,
    pub success_rate: f64,
    pub n: usize,
    pub n_success: usize,
}

/// Mean perturbation norms over the successful runs and the success rate.
pub fn perturbation_metrics(results: &[AttackResult]) -> PerturbationMetrics {
    let ok: Vec<&AttackResult> = results.iter().filter(|r| r.success).collect();
    let mean = |f: fn(&AttackResult) -> f64| {
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    };
    PerturbationMetrics {
        rho_c: mean(|r| r.zeta_norm),
        rho_a: mean(|r| r.h_zeta_norm),
        success_rate: if results.is_empty() {
            0.0
        } else {
            ok.len() as f64 / results.len() as f64
        },
        n: results.len(),
        n_success: ok.len(),
    }
}

/// A random `frac` share of the meters the injection does not touch.
pub fn choose_uncontrolled<R: Rng + ?Sized>(fdia: &FdiaSpec, frac: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!("uncontrolled fraction must lie in [0, 1], got {frac}")));
    }
    let essential = fdia.attacked_meters();
    let free: Vec<usize> = (0..fdia.a.len()).filter(|j| !essential.contains(j)).collect();
    let k = (frac * free.len() as f64).floor() as usize;
    let mut picked: Vec<usize> = sample(rng, free.len(), k).into_iter().map(|i| free[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iteration", "loss", "bdd_statistic", "n_violated_labels"])?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            row.loss.to_string(),
            row.bdd_statistic.to_string(),
            row.n_violated_labels.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcase::{build_grid_model, bundled_case, MeterConfig};
    use crate::rng::stream;

    fn spec_with(a: Vec<usize>, b: Vec<usize>) -> VariantSpec {
        VariantSpec {
            variant: Variant::Lesson1,
            set_a: a,
            set_b: b,
            mask: vec![],
            require_targeted: false,
        }
    }

    #[test]
    fn hinge_values() {
        let logits = [-1.0, 2.0, -0.5];
        assert_eq!(attack_loss(&logits, &spec_with(vec![], vec![0]), Objective::Hinge, &[]), 0.0);
        assert_eq!(attack_loss(&logits, &spec_with(vec![], vec![1]), Objective::Hinge, &[]), 2.0);
        assert_eq!(attack_loss(&logits, &spec_with(vec![2], vec![]), Objective::Hinge, &[]), 0.5);
        let pen = Objective::Penalty { lambda: 2.0 };
        assert_eq!(attack_loss(&logits, &spec_with(vec![], vec![1]), pen, &[3.0, 4.0]), 12.0);
    }

    fn three_state_fdia() -> (crate::gridcase::GridModel, FdiaSpec) {
        let g = build_grid_model(&bundled_case("case14").unwrap(), MeterConfig::default()).unwrap();
        let mut c = vec![0.0; g.n_state];
        c[1] = 0.05;
        c[4] = -0.02;
        let f = FdiaSpec::from_state_error(&g, c, 0.02);
        (g, f)
    }

    #[test]
    fn variant_sets_and_masks() {
        let (g, f) = three_state_fdia();
        let v2 = build_variant(Variant::Lesson2, &f, &[]).unwrap();
        assert_eq!(v2.set_b, (0..g.n_meters()).collect::<Vec<_>>());
        assert!(v2.mask.iter().all(|v| *v == 1.0));

        let v3 = build_variant(Variant::Lesson3, &f, &[]).unwrap();
        let support: Vec<usize> = (0..g.n_meters()).filter(|j| f.a[*j].abs() > 1e-8).collect();
        assert_eq!(v3.set_b, support);
        for (i, m) in v3.mask.iter().enumerate() {
            assert_eq!(*m == 0.0, f.c[i] != 0.0);
        }
        assert!(v3.require_targeted);
        let v1 = build_variant(Variant::Lesson1, &f, &[]).unwrap();
        assert_eq!(v1.set_b, support);
        assert!(v1.mask.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn mask_is_the_indicator_of_zero_state_error() {
        let f = FdiaSpec {
            c: vec![0.5, 0.0, -0.2],
            a: vec![1.0, 0.0],
            target_indices: vec![0, 2],
            scale_variance: 0.02,
        };
        let v = build_variant(Variant::Lesson4, &f, &[]).unwrap();
        assert_eq!(v.mask, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn overlapping_sets_are_a_contradiction() {
        let (_, f) = three_state_fdia();
        let hit = f.attacked_meters()[0];
        match build_variant(Variant::Lesson1, &f, &[hit]) {
            Err(Error::Contradiction(v)) => assert_eq!(v, vec![hit]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(build_variant(Variant::Lesson2, &f, &[0]), Err(Error::Contradiction(_))));
        let free = (0..f.a.len()).find(|j| f.a[*j] == 0.0).unwrap();
        let v = build_variant(Variant::Lesson1, &f, &[free]).unwrap();
        assert_eq!(v.set_a, vec![free]);
    }

    fn result(success: bool, zeta_norm: f64) -> AttackResult {
        AttackResult {
            success,
            iterations_used: 1,
            zeta: vec![],
            theta: vec![],
            z_f: vec![],
            predicted_labels: vec![],
            loss: 0.0,
            bdd_statistic_final: 0.0,
            zeta_norm,
            theta_norm: 2.0 * zeta_norm,
            h_zeta_norm: 2.0 * zeta_norm,
            trace: vec![],
        }
    }

    #[test]
    fn metrics() {
        let none = perturbation_metrics(&[result(false, 1.0), result(false, 2.0)]);
        assert_eq!(none.success_rate, 0.0);
        assert_eq!((none.rho_c, none.rho_a), (None, None));
        assert_eq!(perturbation_metrics(&[result(true, 0.0)]).rho_c, Some(0.0));
        let two = perturbation_metrics(&[result(true, 0.1), result(true, 0.3), result(false, 9.0)]);
        assert!((two.rho_c.unwrap() - 0.2).abs() < 1e-15);
        assert!((two.rho_a.unwrap() - 0.4).abs() < 1e-15);
        assert!((two.success_rate - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uncontrolled_meters_avoid_the_injection() {
        let (g, f) = three_state_fdia();
        let picked = choose_uncontrolled(&f, 0.5, &mut stream(1, "n", 0)).unwrap();
        let essential = f.attacked_meters();
        let free = g.n_meters() - essential.len();
        assert_eq!(picked.len(), free / 2);
        assert!(picked.iter().all(|j| !essential.contains(j)));
        assert!(choose_uncontrolled(&f, 1.5, &mut stream(1, "n", 0)).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("LESSON-3"), Some(Variant::Lesson3));
        assert_eq!(Variant::parse("lesson5"), None);
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::new(Variant::Lesson1);
        c.validate().unwrap();
        c.mu = 0.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::new(Variant::Lesson1);
        c.max_iter = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_csv_has_four_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rows = vec![TraceRow { iteration: 0, loss: 1.5, bdd_statistic: 20.0, n_violated_labels: 3 }];
        write_trace_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "iteration,loss,bdd_statistic,n_violated_labels\n0,1.5,20,3\n");
    }
}
