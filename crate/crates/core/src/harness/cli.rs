//! The `lesson` command-line interface.
//!
//! Every flag may also come from `--config <file>` (plain `key = value`,
//! keys spelled like the flags); flags given on the command line win.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::{
    attack_pool, calibrated_grid, emit_report, run_plan, select_attack_pool, summarize, CellKey,
    ExperimentPlan, KvConfig, ReportFormat,
};
use crate::fdia::{
    generate_dataset, labels_from_attack, load_dataset, make_measurements, random_fdia, sample_state,
    save_dataset, AttackScale, Dataset, DatasetConfig, LabeledSample, LABEL_EPSILON,
};
use crate::gridcase::{load_grid_json, save_grid_json, GridModel};
use crate::lesson::{write_trace_csv, Objective, Variant};
use crate::neural::{evaluate, train, ArchitectureSpec, NalModel, TrainConfig};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "lesson", version, about = "Stealthy multi-label FDIA experiments on DC state estimation")]
pub struct Cli {
    /// Key/value file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled dataset and split it 2:1 into train/ and test/.
    GenData(GenDataArgs),
    /// Train a locator on <data>/train, reporting accuracy on <data>/test.
    Train(TrainArgs),
    /// Print meter and row accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Attack a pool of correctly located samples with one variant.
    Attack(AttackArgs),
    /// Run a plan file over a grid of attack settings.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Bundled case name (case14, case30, case118) or a MATPOWER file.
    #[arg(long)]
    pub case: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_normal: Option<usize>,
    #[arg(long)]
    pub n_attacked_per_scale: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated conv channel widths overriding the preset.
    #[arg(long)]
    pub widths: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// lesson1 .. lesson4
    #[arg(long)]
    pub variant: Option<String>,
    /// small, medium or large
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Share of the non-essential meters the attacker cannot touch.
    #[arg(long)]
    pub uncontrolled_frac: Option<f64>,
    /// Write trace_<k>.csv per attacked sample into --out.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory to draw the pool from; without it, attacked samples
    /// are synthesized from the grid.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for results.csv, results.json and traces.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Use the norm-penalized objective with this weight.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override a plan key, e.g. --set n_attack_samples=20.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

struct Resolver {
    cfg: KvConfig,
}

impl Resolver {
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.cfg.get(key),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.pick(flag, key)?
            .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Load `<dir>/train` or `<dir>/test` when present, else `<dir>` itself.
pub fn load_split(dir: &Path, grid: &GridModel, split: Split) -> Result<Dataset> {
    let sub = dir.join(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    if sub.join("meta.json").exists() {
        load_dataset(&sub, grid)
    } else {
        load_dataset(dir, grid)
    }
}

/// `grid.json` sits next to the split directories; a split directory may be
/// passed directly.
fn grid_for_data(dir: &Path) -> Result<GridModel> {
    let here = dir.join("grid.json");
    match dir.parent().map(|p| p.join("grid.json")) {
        Some(up) if !here.exists() && up.exists() => load_grid_json(&up),
        _ => load_grid_json(&here),
    }
}

fn gen_data(r: &Resolver, a: GenDataArgs) -> Result<()> {
    let case: String = r.need(a.case, "case")?;
    let out: PathBuf = r.need(a.out, "out")?;
    let seed = r.or(a.seed, "seed", 0)?;
    let config = DatasetConfig::new(
        r.or(a.n_normal, "n_normal", 6000)?,
        r.or(a.n_attacked_per_scale, "n_attacked_per_scale", 2000)?,
        seed,
    );
    let grid = calibrated_grid(&case, seed)?;
    let data = generate_dataset(&grid, &config)?;
    let (tr, te) = data.split_train_test(seed);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_grid_json(&grid, &out.join("grid.json"))?;
    save_dataset(&tr, &out.join("train"))?;
    save_dataset(&te, &out.join("test"))?;
    println!(
        "case={} meters={} states={} train={} test={} out={}",
        grid.case_name,
        grid.n_meters(),
        grid.n_state,
        tr.len(),
        te.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(r: &Resolver, a: TrainArgs) -> Result<()> {
    let dir: PathBuf = r.need(a.data, "data")?;
    let out: PathBuf = r.or(a.out, "out", PathBuf::from("model.json"))?;
    let cfg = TrainConfig {
        epochs: r.or(a.epochs, "epochs", 30)?,
        lr: r.or(a.lr, "lr", 1e-3)?,
        batch_size: r.or(a.batch, "batch", 64)?,
        seed: r.or(a.seed, "seed", 0)?,
    };
    let grid = grid_for_data(&dir)?;
    let tr = load_split(&dir, &grid, Split::Train)?;
    let has_test = dir.join("test").join("meta.json").exists();
    let te = if has_test {
        Some(load_split(&dir, &grid, Split::Test)?)
    } else {
        None
    };
    let arch = match r.pick(a.widths, "widths")? {
        Some(w) => {
            let widths = w
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad width {s:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            ArchitectureSpec::preset_with_widths(grid.n_bus, grid.n_meters(), &widths)?
        }
        None => ArchitectureSpec::preset(grid.n_bus, grid.n_meters()),
    };
    let mut model = NalModel::new(&grid.case_name, arch, cfg.seed)?;
    let report = train(&mut model, &tr, te.as_ref(), &cfg)?;
    model.save_json(&out)?;
    println!(
        "epochs={} final_loss={} meter_accuracy={} row_accuracy={} evaluated_on={} out={}",
        report.epochs_run,
        report.final_loss,
        report.meter_accuracy,
        report.row_accuracy,
        if has_test { "test" } else { "train" },
        out.display()
    );
    Ok(())
}

fn eval_cmd(r: &Resolver, a: EvalArgs) -> Result<()> {
    let model = NalModel::load_json(&r.need::<PathBuf>(a.model, "model")?)?;
    let dir: PathBuf = r.need(a.data, "data")?;
    let grid = grid_for_data(&dir)?;
    let data = load_split(&dir, &grid, Split::Test)?;
    let acc = evaluate(&model, &data)?;
    println!("meter_accuracy={} row_accuracy={} samples={}", acc.meter, acc.row, data.len());
    Ok(())
}

/// Draw fresh attacked samples of `scale` until `n` are located completely
/// correctly by the model.
pub fn synthesize_pool(
    model: &NalModel,
    grid: &GridModel,
    scale: AttackScale,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let budget = 200 * n.max(1);
    let mut out = Vec::with_capacity(n);
    for id in 0..budget {
        if out.len() == n {
            break;
        }
        let mut rng = stream(seed, "synth-pool", id as u64);
        let (_, x) = sample_state(grid, &mut rng);
        let mut z = make_measurements(grid, &x, &mut rng)?;
        let f = random_fdia(grid, scale.variance(), &mut rng)?;
        for (zi, ai) in z.iter_mut().zip(&f.a) {
            *zi += ai;
        }
        let y = labels_from_attack(&f.a, LABEL_EPSILON);
        if model.predict_labels(&z)? == y {
            out.push(LabeledSample {
                id,
                z,
                y,
                fdia: Some(f),
                x_true: x,
            });
        }
    }
    if out.len() < n {
        return Err(Error::Pool {
            requested: n,
            eligible: out.len(),
        });
    }
    Ok(out)
}

fn attack_cmd(r: &Resolver, a: AttackArgs) -> Result<()> {
    let model = NalModel::load_json(&r.need::<PathBuf>(a.model, "model")?)?;
    let grid = load_grid_json(&r.need::<PathBuf>(a.grid, "grid")?)?;
    let vname: String = r.need(a.variant, "variant")?;
    let variant = Variant::parse(&vname).ok_or_else(|| Error::Config(format!("unknown variant {vname:?}")))?;
    let sname: String = r.or(a.scale, "scale", "small".to_string())?;
    let scale = AttackScale::parse(&sname).ok_or_else(|| Error::Config(format!("unknown scale {sname:?}")))?;
    let seed = r.or(a.seed, "seed", 0)?;
    let n = r.or(a.n, "n", 100)?;
    let mut plan = ExperimentPlan::desk(&grid.case_name, seed);
    plan.max_iter = r.or(a.max_iter, "max_iter", 500)?;
    if let Some(lambda) = r.pick(a.lambda, "lambda")? {
        plan.objective = Objective::Penalty { lambda };
    }
    let key = CellKey {
        variant,
        scale,
        lr: r.or(a.lr, "lr", 1e-3)?,
        mu: r.or(a.mu, "mu", 1.0)?,
        uncontrolled_frac: r.or(a.uncontrolled_frac, "uncontrolled_frac", 0.0)?,
    };
    let samples: Vec<LabeledSample> = match r.pick(a.data, "data")? {
        Some(dir) => {
            let data: Dataset = load_split(&dir, &grid, Split::Test)?;
            select_attack_pool(&model, &data, scale, n, seed)?
                .into_iter()
                .map(|i| data.samples[i].clone())
                .collect()
        }
        None => synthesize_pool(&model, &grid, scale, n, seed)?,
    };
    let pool: Vec<&LabeledSample> = samples.iter().collect();
    let out: Option<PathBuf> = r.pick(a.out, "out")?;
    let start = Instant::now();
    let results = attack_pool(key, &pool, &grid, &model, &plan, a.trace)?;
    let cell = summarize(&grid.case_name, key, &results, start.elapsed().as_secs_f64());
    let dir = out.unwrap_or_else(|| PathBuf::from("."));
    if a.trace {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, res) in results.iter().enumerate() {
            write_trace_csv(&dir.join(format!("trace_{k}.csv")), &res.trace)?;
        }
    }
    emit_report(std::slice::from_ref(&cell), &dir, ReportFormat::Both)?;
    let fmt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
    println!(
        "variant={} scale={} n={} success_rate={} rho_c={} rho_a={} mean_iters={}",
        cell.variant,
        scale.name(),
        cell.n,
        cell.success_rate,
        fmt(cell.rho_c),
        fmt(cell.rho_a),
        cell.mean_iters
    );
    Ok(())
}

fn sweep_cmd(base: Option<KvConfig>, a: SweepArgs) -> Result<()> {
    let mut cfg = KvConfig::load(&a.plan)?;
    if let Some(global) = base {
        for key in global.keys() {
            if cfg.get_str(key).is_none() {
                cfg.set(key, global.get_str(key).unwrap_or_default());
            }
        }
    }
    for o in &a.overrides {
        cfg.set_override(o)?;
    }
    let root = a.plan.parent().unwrap_or(Path::new("."));
    let plan = ExperimentPlan::from_config(&cfg, root)?;
    let results = run_plan(&plan)?;
    emit_report(&results, &a.out, ReportFormat::Both)?;
    for c in &results {
        println!(
            "variant={} scale={} lr={} mu={} uncontrolled={} success_rate={}",
            c.variant, c.scale, c.lr, c.mu, c.uncontrolled_frac, c.success_rate
        );
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Some(KvConfig::load(p)?),
        None => None,
    };
    let r = Resolver {
        cfg: cfg.clone().unwrap_or_default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&r, a),
        Command::Train(a) => train_cmd(&r, a),
        Command::Eval(a) => eval_cmd(&r, a),
        Command::Attack(a) => attack_cmd(&r, a),
        Command::Sweep(a) => sweep_cmd(cfg, a),
    }
}

/// One-line, machine-parsable error description.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={}", e.kind(), msg)
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
