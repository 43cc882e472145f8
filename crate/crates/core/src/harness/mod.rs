//! Experiment orchestration: attack pools, plan grids, reports and the CLI.

pub mod cli;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::KvConfig;

use crate::fdia::{calibrate_from_load_model, AttackScale, Dataset, LabeledSample};
use crate::gridcase::{build_grid_model, load_case, GridModel, MeterConfig};
use crate::lesson::{
    choose_uncontrolled, perturbation_metrics, run_attack, AttackConfig, AttackResult, Objective, Variant,
};
use crate::neural::{predict_many, NalModel};
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

pub const CALIBRATION_SAMPLES: usize = 1000;

/// Parse a case and install noise standard deviations drawn from the load
/// model.
pub fn calibrated_grid(case: &str, seed: u64) -> Result<GridModel> {
    let grid = build_grid_model(&load_case(case)?, MeterConfig::default())?;
    calibrate_from_load_model(&grid, CALIBRATION_SAMPLES, &mut stream(seed, "calibration", 0))
}

/// Indices of `n` attacked samples of `scale`, drawn uniformly among those the
/// model labels completely correctly. Returned in ascending order.
pub fn select_attack_pool(
    model: &NalModel,
    data: &Dataset,
    scale: AttackScale,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = data.attacked_at(scale).map(|(i, _)| i).collect();
    let zs: Vec<&[f64]> = candidates.iter().map(|i| data.samples[*i].z.as_slice()).collect();
    let predicted = predict_many(model, &zs)?;
    let eligible: Vec<usize> = candidates
        .iter()
        .zip(&predicted)
        .filter(|(i, p)| **p == data.samples[**i].y)
        .map(|(i, _)| *i)
        .collect();
    if eligible.len() < n {
        return Err(Error::Pool {
            requested: n,
            eligible: eligible.len(),
        });
    }
    let mut rng = stream(seed, "pool", scale.variance().to_bits());
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub case: String,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub scales: Vec<AttackScale>,
    pub lrs: Vec<f64>,
    pub mus: Vec<f64>,
    /// Fractions of non-essential meters left uncontrolled (0 = full control).
    pub uncontrolled_fracs: Vec<f64>,
    pub n_attack_samples: usize,
    pub max_iter: usize,
    pub objective: Objective,
    pub seed: u64,
    pub workers: usize,
}

pub const LR_GRID: [f64; 6] = [0.0005, 0.001, 0.005, 0.01, 0.1, 0.2];

impl ExperimentPlan {
    pub fn desk(case: &str, seed: u64) -> Self {
        ExperimentPlan {
            case: case.to_string(),
            data: None,
            model: None,
            grid: None,
            variants: Variant::ALL.to_vec(),
            scales: vec![AttackScale::Small],
            lrs: vec![0.001],
            mus: vec![1.0],
            uncontrolled_fracs: vec![0.0],
            n_attack_samples: 100,
            max_iter: 500,
            objective: Objective::Hinge,
            seed,
            workers: 1,
        }
    }

    /// Build from a plan file. Relative artifact paths resolve against
    /// `base`.
    pub fn from_config(cfg: &KvConfig, base: &Path) -> Result<Self> {
        let path = |key: &str| -> Option<PathBuf> { cfg.get_str(key).map(|p| base.join(p)) };
        let mut plan = ExperimentPlan::desk(&cfg.require::<String>("case")?, cfg.get_or("seed", 0)?);
        plan.data = path("data");
        plan.model = path("model");
        plan.grid = path("grid");
        if let Some(v) = cfg.get_list::<String>("variants")? {
            plan.variants = v
                .iter()
                .map(|s| Variant::parse(s).ok_or_else(|| Error::Config(format!("unknown variant {s:?}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = cfg.get_list::<String>("scales")? {
            plan.scales = v
                .iter()
                .map(|s| AttackScale::parse(s).ok_or_else(|| Error::Config(format!("unknown scale {s:?}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = cfg.get_list("lrs")? {
            plan.lrs = v;
        }
        if let Some(v) = cfg.get_list("mus")? {
            plan.mus = v;
        }
        if let Some(v) = cfg.get_list("uncontrolled_fracs")? {
            plan.uncontrolled_fracs = v;
        }
        plan.n_attack_samples = cfg.get_or("n_attack_samples", plan.n_attack_samples)?;
        plan.max_iter = cfg.get_or("max_iter", plan.max_iter)?;
        plan.workers = cfg.get_or("workers", plan.workers)?;
        if let Some(lambda) = cfg.get::<f64>("lambda")? {
            plan.objective = Objective::Penalty { lambda };
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attack_samples == 0 {
            return Err(Error::Config("n_attack_samples must be >= 1".into()));
        }
        if self.variants.is_empty() || self.scales.is_empty() || self.lrs.is_empty() || self.mus.is_empty() {
            return Err(Error::Config("plan axes must be non-empty".into()));
        }
        if self.uncontrolled_fracs.is_empty() {
            return Err(Error::Config("uncontrolled_fracs must be non-empty".into()));
        }
        for (key, p) in [("data", &self.data), ("model", &self.model), ("grid", &self.grid)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{key} artifact {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &scale in &self.scales {
                for &lr in &self.lrs {
                    for &mu in &self.mus {
                        for &uncontrolled_frac in &self.uncontrolled_fracs {
                            out.push(CellKey {
                                variant,
                                scale,
                                lr,
                                mu,
                                uncontrolled_frac,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: Variant,
    pub scale: AttackScale,
    pub lr: f64,
    pub mu: f64,
    pub uncontrolled_frac: f64,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!(
            "variant={} scale={} lr={} mu={} uncontrolled={}",
            self.variant,
            self.scale.name(),
            self.lr,
            self.mu,
            self.uncontrolled_frac
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub case: String,
    pub variant: Variant,
    /// Attack variance `nu^2`.
    pub scale: f64,
    pub lr: f64,
    pub mu: f64,
    pub uncontrolled_frac: f64,
    pub n: usize,
    pub success_rate: f64,
    pub rho_c: Option<f64>,
    pub rho_a: Option<f64>,
    pub mean_iters: f64,
    pub wall_s: f64,
}

impl CellResult {
    pub fn key(&self) -> CellKey {
        CellKey {
            variant: self.variant,
            scale: AttackScale::from_variance(self.scale).unwrap_or(AttackScale::Small),
            lr: self.lr,
            mu: self.mu,
            uncontrolled_frac: self.uncontrolled_frac,
        }
    }
}

/// Attack every sample of `pool` under one cell's settings. Results keep the
/// pool order.
pub fn attack_pool(
    key: CellKey,
    pool: &[&LabeledSample],
    grid: &GridModel,
    model: &NalModel,
    plan: &ExperimentPlan,
    record_trace: bool,
) -> Result<Vec<AttackResult>> {
    pool.par_iter()
        .map(|sample| {
            let fdia = sample
                .fdia
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("sample {} is not attacked", sample.id)))?;
            let mut cfg = AttackConfig::new(key.variant);
            cfg.lr = key.lr;
            cfg.mu = key.mu;
            cfg.max_iter = plan.max_iter;
            cfg.objective = plan.objective;
            cfg.record_trace = record_trace;
            cfg.seed = derive_seed(plan.seed, "attack", sample.id as u64);
            if key.uncontrolled_frac > 0.0 {
                // Keyed by sample only, so every variant sees the same meters.
                let mut rng = stream(plan.seed, "uncontrolled", sample.id as u64);
                cfg.uncontrolled_meters = choose_uncontrolled(fdia, key.uncontrolled_frac, &mut rng)?;
            }
            run_attack(model, grid, &sample.z, fdia, &cfg)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Cell {
            context: key.label(),
            source: Box::new(e),
        })
}

pub fn summarize(case: &str, key: CellKey, results: &[AttackResult], wall_s: f64) -> CellResult {
    let metrics = perturbation_metrics(results);
    let mean_iters = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.iterations_used as f64).sum::<f64>() / results.len() as f64
    };
    CellResult {
        case: case.to_string(),
        variant: key.variant,
        scale: key.scale.variance(),
        lr: key.lr,
        mu: key.mu,
        uncontrolled_frac: key.uncontrolled_frac,
        n: results.len(),
        success_rate: metrics.success_rate,
        rho_c: metrics.rho_c,
        rho_a: metrics.rho_a,
        mean_iters,
        wall_s,
    }
}

pub fn run_cell(
    case: &str,
    key: CellKey,
    pool: &[&LabeledSample],
    grid: &GridModel,
    model: &NalModel,
    plan: &ExperimentPlan,
) -> Result<CellResult> {
    let start = Instant::now();
    let results = attack_pool(key, pool, grid, model, plan, false)?;
    Ok(summarize(case, key, &results, start.elapsed().as_secs_f64()))
}

/// Run a plan against artifacts already in memory. `data` supplies the
/// attack pools (normally the held-out split).
pub fn run_plan_with(
    plan: &ExperimentPlan,
    grid: &GridModel,
    model: &NalModel,
    data: &Dataset,
) -> Result<Vec<CellResult>> {
    plan.validate()?;
    let mut pools: BTreeMap<u64, Vec<&LabeledSample>> = BTreeMap::new();
    for &scale in &plan.scales {
        let idx = select_attack_pool(model, data, scale, plan.n_attack_samples, plan.seed)?;
        pools.insert(scale.variance().to_bits(), idx.iter().map(|i| &data.samples[*i]).collect());
    }
    let workers = plan.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        plan.cells()
            .into_iter()
            .map(|key| {
                let samples = &pools[&key.scale.variance().to_bits()];
                run_cell(&plan.case, key, samples, grid, model, plan)
            })
            .collect()
    })
}

/// Load the plan's artifacts from disk and run it.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<CellResult>> {
    plan.validate()?;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("plan needs a {key} path")))
    };
    let data_dir = need(&plan.data, "data")?;
    let model = NalModel::load_json(&need(&plan.model, "model")?)?;
    let grid = match &plan.grid {
        Some(p) => crate::gridcase::load_grid_json(p)?,
        None => crate::gridcase::load_grid_json(&data_dir.join("grid.json"))?,
    };
    let data = cli::load_split(&data_dir, &grid, cli::Split::Test)?;
    run_plan_with(plan, &grid, &model, &data)
}

pub const CSV_COLUMNS: [&str; 11] = [
    "case",
    "variant",
    "scale",
    "lr",
    "mu",
    "n",
    "success_rate",
    "rho_c",
    "rho_a",
    "mean_iters",
    "wall_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `results.csv` and/or `results.json` into `dir`.
pub fn emit_report(results: &[CellResult], dir: &Path, format: ReportFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if format != ReportFormat::Json {
        let path = dir.join("results.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(CSV_COLUMNS)?;
        for r in results {
            w.write_record([
                r.case.clone(),
                r.variant.to_string(),
                r.scale.to_string(),
                r.lr.to_string(),
                r.mu.to_string(),
                r.n.to_string(),
                r.success_rate.to_string(),
                opt(r.rho_c),
                opt(r.rho_a),
                r.mean_iters.to_string(),
                r.wall_s.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if format != ReportFormat::Csv {
        let path = dir.join("results.json");
        let text = serde_json::to_string_pretty(&serde_json::json!({ "cells": results }))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read back a `results.json` written by [`emit_report`].
pub fn read_results_json(path: &Path) -> Result<Vec<CellResult>> {
    #[derive(Deserialize)]
    struct Doc {
        cells: Vec<CellResult>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<Doc>(&text)?.cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdia::{generate_dataset, DatasetConfig};
    use crate::neural::{ArchitectureSpec, Mode};

    fn cell(variant: Variant, rho: Option<f64>) -> CellResult {
        CellResult {
            case: "case14".into(),
            variant,
            scale: 0.02,
            lr: 0.001,
            mu: 1.0,
            uncontrolled_frac: 0.0,
            n: 100,
            success_rate: 0.97,
            rho_c: rho,
            rho_a: rho.map(|r| r * 3.0),
            mean_iters: 12.5,
            wall_s: 0.25,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], dir.path(), ReportFormat::Both).unwrap();
        let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(text.trim_end(), CSV_COLUMNS.join(","));
        assert!(read_results_json(&dir.path().join("results.json")).unwrap().is_empty());
    }

    #[test]
    fn csv_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cells = vec![cell(Variant::Lesson1, Some(0.1 + 0.2)), cell(Variant::Lesson4, None)];
        emit_report(&cells, dir.path(), ReportFormat::Both).unwrap();
        let mut rdr = csv::Reader::from_path(dir.path().join("results.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.len() == 11));
        let json = read_results_json(&dir.path().join("results.json")).unwrap();
        assert_eq!(json, cells);
        for (row, c) in rows.iter().zip(&json) {
            assert_eq!(&row[1], c.variant.name());
            assert_eq!(row[2].parse::<f64>().unwrap(), c.scale);
            assert_eq!(row[5].parse::<usize>().unwrap(), c.n);
            assert_eq!(row[6].parse::<f64>().unwrap(), c.success_rate);
            let rho: Option<f64> = (!row[7].is_empty()).then(|| row[7].parse().unwrap());
            assert_eq!(rho, c.rho_c);
        }
    }

    #[test]
    fn unwritable_report_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(
            emit_report(&[], &file.join("sub"), ReportFormat::Csv),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn plan_from_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = KvConfig::parse(
            "case = case14\nvariants = lesson2, lesson4\nscales = small, 0.5\nlrs = 0.001, 0.2\nn_attack_samples = 7\nseed = 3\nlambda = 0.5\n",
        )
        .unwrap();
        let plan = ExperimentPlan::from_config(&cfg, dir.path()).unwrap();
        assert_eq!(plan.variants, vec![Variant::Lesson2, Variant::Lesson4]);
        assert_eq!(plan.scales, vec![AttackScale::Small, AttackScale::Large]);
        assert_eq!(plan.cells().len(), 8);
        assert_eq!(plan.objective, Objective::Penalty { lambda: 0.5 });
        plan.validate().unwrap();
        let bad = KvConfig::parse("case = case14\nmodel = missing.json\n").unwrap();
        assert!(ExperimentPlan::from_config(&bad, dir.path()).unwrap().validate().is_err());
        let mut zero = plan.clone();
        zero.n_attack_samples = 0;
        assert!(zero.validate().is_err());
    }

    fn tiny_setup() -> (GridModel, NalModel, Dataset) {
        let grid = calibrated_grid("case14", 1).unwrap();
        let data = generate_dataset(&grid, &DatasetConfig::new(30, 30, 2)).unwrap();
        let arch = ArchitectureSpec::conv_stack(grid.n_meters(), &[(3, 2)]);
        let mut model = NalModel::new("case14", arch, 0).unwrap();
        model.mode = Mode::Eval;
        (grid, model, data)
    }

    #[test]
    fn pool_selection_rules() {
        let (_, mut model, data) = tiny_setup();
        // With every parameter zero the model predicts all-normal, so no
        // attacked sample is completely correct.
        for p in model.params_mut() {
            p.fill(0.0);
        }
        match select_attack_pool(&model, &data, AttackScale::Small, 1, 0) {
            Err(Error::Pool { requested: 1, eligible: 0 }) => {}
            other => panic!("{other:?}"),
        }
        let (_, _, data2) = tiny_setup();
        let model_ok = label_oracle_model(&data2);
        let a = select_attack_pool(&model_ok, &data2, AttackScale::Medium, 1, 5).unwrap();
        let b = select_attack_pool(&model_ok, &data2, AttackScale::Medium, 1, 5).unwrap();
        assert_eq!(a, b);
        assert!(select_attack_pool(&model_ok, &data2, AttackScale::Medium, 1000, 5).is_err());
    }

    /// A model whose output bias alone reproduces the label vector of the
    /// first medium-scale sample; that sample is then always eligible.
    fn label_oracle_model(data: &Dataset) -> NalModel {
        let (_, target) = data.attacked_at(AttackScale::Medium).next().unwrap();
        let arch = ArchitectureSpec::conv_stack(data.n_meters(), &[(3, 2)]);
        let mut model = NalModel::new("case14", arch, 0).unwrap();
        let n = model.params().len();
        for p in model.params_mut().into_iter().take(n - 1) {
            p.fill(0.0);
        }
        let bias = model.params_mut().pop().unwrap();
        for (b, y) in bias.iter_mut().zip(&target.y) {
            *b = if *y == 1 { 5.0 } else { -5.0 };
        }
        model
    }

    #[test]
    fn plan_runs_are_deterministic_and_cells_independent() {
        let (grid, _, data) = tiny_setup();
        let model = label_oracle_model(&data);
        let mut plan = ExperimentPlan::desk("case14", 4);
        plan.scales = vec![AttackScale::Medium];
        plan.n_attack_samples = 1;
        plan.max_iter = 5;
        plan.variants = vec![Variant::Lesson1, Variant::Lesson2];
        let strip = |mut v: Vec<CellResult>| {
            v.iter_mut().for_each(|c| c.wall_s = 0.0);
            v
        };
        let a = strip(run_plan_with(&plan, &grid, &model, &data).unwrap());
        let b = strip(run_plan_with(&plan, &grid, &model, &data).unwrap());
        assert_eq!(a, b);
        plan.variants.reverse();
        let c = strip(run_plan_with(&plan, &grid, &model, &data).unwrap());
        assert_eq!(a[0], c[1]);
        assert_eq!(a[1], c[0]);
    }
}
