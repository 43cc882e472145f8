use lesson_core::estimation::{bdd_detect, bdd_statistic, chi_square_threshold, wls_estimate, DEFAULT_SIGNIFICANCE};
use lesson_core::fdia::{labels_from_attack, make_measurements, random_fdia, sample_state, AttackScale, LABEL_EPSILON};
use lesson_core::gridcase::{build_grid_model, bundled_case, parse_matpower_case, GridModel, MeterConfig, BUNDLED_CASES};
use lesson_core::harness::calibrated_grid;
use lesson_core::lesson::{run_attack, AttackConfig, AttackProblem, Variant};
use lesson_core::neural::{labels_from_confidence, labels_from_logits, sigmoid, ArchitectureSpec, Mode, NalModel};
use lesson_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn grids() -> &'static [GridModel] {
    static GRIDS: OnceLock<Vec<GridModel>> = OnceLock::new();
    GRIDS.get_or_init(|| BUNDLED_CASES.iter().map(|c| calibrated_grid(c, 11).unwrap()).collect())
}

fn case14() -> &'static GridModel {
    &grids()[0]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn uniform_shift_leaves_flows_between_non_slack_buses_at_zero() {
    for grid in grids() {
        let z = grid.measure(&vec![1.0; grid.n_state]);
        for (j, br) in grid.branches.iter().enumerate() {
            if br.from != grid.slack && br.to != grid.slack {
                assert_eq!(z[j], 0.0, "{} branch {j}", grid.case_name);
            }
        }
    }
}

#[test]
fn case_files_survive_serialize_and_reparse() {
    for name in BUNDLED_CASES {
        let raw = bundled_case(name).unwrap();
        let again = parse_matpower_case(&raw.to_matpower()).unwrap();
        assert_eq!(raw, again, "{name}");
    }
}

#[test]
fn grid_construction_is_bitwise_deterministic() {
    for name in BUNDLED_CASES {
        let raw = bundled_case(name).unwrap();
        let a = build_grid_model(&raw, MeterConfig::default()).unwrap();
        let b = build_grid_model(&raw, MeterConfig::default()).unwrap();
        let bits = |g: &GridModel| g.h_matrix.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn residual_test_ignores_stealthy_attacks_on_every_system() {
    for grid in grids() {
        let mut rng = stream(1, "residual-invariance", grid.n_bus as u64);
        for _ in 0..1000 {
            let (_, x) = sample_state(grid, &mut rng);
            let z = make_measurements(grid, &x, &mut rng).unwrap();
            let scale = [0.02, 0.1, 0.5][rng.random_range(0..3)];
            let attack = random_fdia(grid, scale, &mut rng).unwrap();
            let z_a: Vec<f64> = z.iter().zip(&attack.a).map(|(z, a)| z + a).collect();
            let before = bdd_statistic(grid, &z).unwrap();
            let after = bdd_statistic(grid, &z_a).unwrap();
            assert!(
                (after - before).abs() <= 1e-9 * (1.0 + before),
                "{}: {before} vs {after}",
                grid.case_name
            );
            let flagged = |z: &[f64]| bdd_detect(grid, z, DEFAULT_SIGNIFICANCE).unwrap().flagged;
            assert_eq!(flagged(&z), flagged(&z_a));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn estimate_of_fitted_measurements_is_a_fixed_point(seed in any::<u64>(), which in 0usize..3) {
        let grid = &grids()[which];
        let mut rng = stream(seed, "idempotence", 0);
        let (_, x) = sample_state(grid, &mut rng);
        let z = make_measurements(grid, &x, &mut rng).unwrap();
        let x_hat = wls_estimate(grid, &z).unwrap();
        let again = wls_estimate(grid, &grid.measure(&x_hat)).unwrap();
        prop_assert!(max_abs_diff(&x_hat, &again) <= 1e-10);
    }

    #[test]
    fn estimator_is_additive(seed in any::<u64>(), which in 0usize..3) {
        let grid = &grids()[which];
        let mut rng = stream(seed, "linearity", 0);
        let z1: Vec<f64> = (0..grid.n_meters()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z2: Vec<f64> = (0..grid.n_meters()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let lhs = wls_estimate(grid, &sum).unwrap();
        let rhs: Vec<f64> = wls_estimate(grid, &z1)
            .unwrap()
            .iter()
            .zip(wls_estimate(grid, &z2).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn labels_mark_exactly_the_structural_support(seed in any::<u64>(), which in 0usize..3, scale in 0usize..3) {
        let grid = &grids()[which];
        let mut rng = stream(seed, "support", 0);
        let attack = random_fdia(grid, AttackScale::ALL[scale].variance(), &mut rng).unwrap();
        let y = labels_from_attack(&attack.a, LABEL_EPSILON);
        for j in 0..grid.n_meters() {
            let touches = attack.target_indices.iter().any(|&t| grid.h_matrix[(j, t)] != 0.0);
            let cancelled = attack.a[j].abs() <= LABEL_EPSILON;
            prop_assert_eq!(y[j] == 1, touches && !cancelled, "meter {}", j);
        }
        let k = attack.target_indices.len();
        prop_assert!(k >= 1 && k <= grid.n_state / 2);
    }

    #[test]
    fn confidence_and_logit_thresholds_agree(seed in any::<u64>()) {
        let mut rng = stream(seed, "thresholds", 0);
        let logits: Vec<f64> = (0..1000)
            .map(|_| 40.0 * (rng.random::<f64>() - 0.5))
            .collect();
        let psi: Vec<f64> = logits.iter().map(|u| sigmoid(*u)).collect();
        prop_assert_eq!(labels_from_logits(&logits), labels_from_confidence(&psi));
    }
}

#[test]
fn chi_square_quantiles_match_monte_carlo() {
    let mut rng = stream(3, "chi2-mc", 0);
    for dof in [1usize, 5, 21] {
        let mut draws: Vec<f64> = (0..1_000_000)
            .map(|_| {
                (0..dof)
                    .map(|_| {
                        let g: f64 = rng.sample(StandardNormal);
                        g * g
                    })
                    .sum()
            })
            .collect();
        draws.sort_unstable_by(f64::total_cmp);
        let empirical = draws[(0.99 * draws.len() as f64) as usize];
        let exact = chi_square_threshold(dof, 0.99).unwrap();
        assert!(
            ((exact - empirical) / exact).abs() < 0.01,
            "dof {dof}: {exact} vs {empirical}"
        );
    }
}

#[test]
fn attack_size_grows_with_scale() {
    for grid in grids() {
        let means: Vec<f64> = AttackScale::ALL
            .iter()
            .map(|s| {
                let mut rng = stream(9, "scale-monotone", s.variance().to_bits());
                (0..1000)
                    .map(|_| {
                        let a = random_fdia(grid, s.variance(), &mut rng).unwrap().a;
                        a.iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .sum::<f64>()
                    / 1000.0
            })
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{}: {means:?}", grid.case_name);
    }
}

fn untrained_case14_model() -> &'static NalModel {
    static MODEL: OnceLock<NalModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let grid = case14();
        let arch = ArchitectureSpec::preset(grid.n_bus, grid.n_meters());
        let mut model = NalModel::new("case14", arch, 5).unwrap();
        let mut rng = stream(5, "standardize", 0);
        let zs: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let (_, x) = sample_state(grid, &mut rng);
                make_measurements(grid, &x, &mut rng).unwrap()
            })
            .collect();
        model.fit_standardization(zs.iter().map(Vec::as_slice));
        model.mode = Mode::Eval;
        model
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn perturbations_stay_strictly_inside_the_box(
        w in prop::collection::vec(-1e3f64..1e3, 13),
        mu in 0.01f64..3.0,
        seed in any::<u64>(),
    ) {
        let grid = case14();
        let mut rng = stream(seed, "box", 0);
        let attack = random_fdia(grid, 0.1, &mut rng).unwrap();
        let (_, x) = sample_state(grid, &mut rng);
        let z: Vec<f64> = make_measurements(grid, &x, &mut rng)
            .unwrap()
            .iter()
            .zip(&attack.a)
            .map(|(z, a)| z + a)
            .collect();
        let mut cfg = AttackConfig::new(Variant::Lesson4);
        cfg.mu = mu;
        let problem = AttackProblem::new(untrained_case14_model(), grid, &z, &attack, &cfg).unwrap();
        let (zeta, h_zeta, theta, z_f) = problem.perturb(&w);
        prop_assert!(zeta.iter().all(|v| v.abs() < mu));
        for &t in &attack.target_indices {
            prop_assert_eq!(zeta[t], 0.0);
        }
        prop_assert_eq!(&h_zeta, &theta);
        prop_assert_eq!(z_f, z.iter().zip(&theta).map(|(a, b)| a + b).collect::<Vec<_>>());
    }
}

#[test]
fn finished_attacks_are_stealthy_bounded_and_reproducible() {
    let grid = case14();
    let model = untrained_case14_model();
    let mut checked = 0;
    for i in 0..100u64 {
        let mut rng = stream(21, "attack-invariants", i);
        let (_, x) = sample_state(grid, &mut rng);
        let z = make_measurements(grid, &x, &mut rng).unwrap();
        let attack = random_fdia(grid, 0.02, &mut rng).unwrap();
        let z_a: Vec<f64> = z.iter().zip(&attack.a).map(|(z, a)| z + a).collect();
        let variant = Variant::ALL[i as usize % 4];
        let mut cfg = AttackConfig::new(variant);
        cfg.lr = [0.001, 0.01, 0.2][i as usize % 3];
        cfg.max_iter = 60;
        cfg.record_trace = true;
        let r = run_attack(model, grid, &z_a, &attack, &cfg).unwrap();
        assert!(r.zeta.iter().all(|v| v.abs() < cfg.mu));
        let before = bdd_statistic(grid, &z_a).unwrap();
        assert!((r.bdd_statistic_final - before).abs() <= 1e-9 * (1.0 + before));
        for row in &r.trace {
            assert!((row.bdd_statistic - before).abs() <= 1e-9 * (1.0 + before));
        }
        if variant.is_targeted() {
            for &t in &attack.target_indices {
                assert_eq!(r.zeta[t], 0.0);
            }
        }
        if r.success {
            checked += 1;
            let text = serde_json::to_string(&r).unwrap();
            let back: lesson_core::lesson::AttackResult = serde_json::from_str(&text).unwrap();
            let labels = model.predict_labels(&back.z_f).unwrap();
            assert_eq!(labels, r.predicted_labels);
            let spec = lesson_core::lesson::build_variant(variant, &attack, &[]).unwrap();
            assert!(spec.satisfied_by(&labels));
        }
    }
    eprintln!("{checked} successful attacks re-verified");
}
