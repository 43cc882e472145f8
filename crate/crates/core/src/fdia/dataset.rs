use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    labels_from_attack, make_measurements, random_fdia, sample_state, AttackScale, FdiaSpec,
    LABEL_EPSILON,
};
use crate::gridcase::GridModel;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Generation index; attacked samples keep the index of the clean draw
    /// they were built from.
    pub id: usize,
    pub z: Vec<f64>,
    pub y: Vec<u8>,
    pub fdia: Option<FdiaSpec>,
    pub x_true: Vec<f64>,
}

impl LabeledSample {
    pub fn is_attacked(&self) -> bool {
        self.fdia.is_some()
    }

    /// The reading before the attack was added (`z - a`).
    pub fn clean_measurement(&self) -> Vec<f64> {
        match &self.fdia {
            Some(f) => self.z.iter().zip(&f.a).map(|(z, a)| z - a).collect(),
            None => self.z.clone(),
        }
    }

    pub fn scale(&self) -> Option<AttackScale> {
        self.fdia
            .as_ref()
            .and_then(|f| AttackScale::from_variance(f.scale_variance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub case_name: String,
    pub n_meters: usize,
    pub n_normal: usize,
    pub n_attacked: usize,
    pub counts_per_scale: BTreeMap<String, usize>,
    pub noise_sigma: Vec<f64>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_normal: usize,
    pub n_attacked_per_scale: usize,
    pub seed: u64,
    pub scales: Vec<AttackScale>,
}

impl DatasetConfig {
    pub fn new(n_normal: usize, n_attacked_per_scale: usize, seed: u64) -> Self {
        DatasetConfig {
            n_normal,
            n_attacked_per_scale,
            seed,
            scales: AttackScale::ALL.to_vec(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_meters(&self) -> usize {
        self.meta.n_meters
    }

    fn with_samples(&self, samples: Vec<LabeledSample>, split: &str) -> Dataset {
        let mut meta = self.meta.clone();
        meta.split = split.to_string();
        recount(&mut meta, &samples);
        Dataset { samples, meta }
    }

    /// Uniformly shuffle and cut 2:1 into (train, test).
    pub fn split_train_test(&self, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, "split", 0));
        let n_train = (self.len() * 2 + 1) / 3;
        let pick = |idx: &[usize]| idx.iter().map(|i| self.samples[*i].clone()).collect();
        (
            self.with_samples(pick(&order[..n_train]), "train"),
            self.with_samples(pick(&order[n_train..]), "test"),
        )
    }

    pub fn attacked_at(&self, scale: AttackScale) -> impl Iterator<Item = (usize, &LabeledSample)> {
        self.samples
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.scale() == Some(scale))
    }
}

fn recount(meta: &mut DatasetMeta, samples: &[LabeledSample]) {
    meta.n_attacked = samples.iter().filter(|s| s.is_attacked()).count();
    meta.n_normal = samples.len() - meta.n_attacked;
    meta.counts_per_scale = AttackScale::ALL
        .iter()
        .map(|s| {
            (
                s.name().to_string(),
                samples.iter().filter(|x| x.scale() == Some(*s)).count(),
            )
        })
        .collect();
}

/// Generate clean samples, attack a random subset of them, and shuffle.
///
/// `n_normal + n_attacked_per_scale * scales.len()` clean draws are made;
/// a uniformly chosen subset receives attacks (one block per scale). Each
/// sample owns a seed-derived random stream, so the result does not depend
/// on the rayon worker count.
pub fn generate_dataset(grid: &GridModel, config: &DatasetConfig) -> Result<Dataset> {
    if config.n_normal == 0 || config.n_attacked_per_scale == 0 || config.scales.is_empty() {
        return Err(Error::Precondition("dataset counts must be >= 1".into()));
    }
    let sigma = grid.require_noise_sigma()?.to_vec();
    let n_attacked = config.n_attacked_per_scale * config.scales.len();
    let total = config.n_normal + n_attacked;

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(config.seed, "assign", 0));
    let mut scale_of = vec![None; total];
    for (rank, idx) in order.iter().take(n_attacked).enumerate() {
        scale_of[*idx] = Some(config.scales[rank / config.n_attacked_per_scale]);
    }

    let samples: Result<Vec<LabeledSample>> = (0..total)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream(config.seed, "sample", id as u64);
            let (_, x) = sample_state(grid, &mut rng);
            let mut z = make_measurements(grid, &x, &mut rng)?;
            let (y, fdia) = match scale_of[id] {
                Some(scale) => {
                    let f = random_fdia(grid, scale.variance(), &mut rng)?;
                    for (zi, ai) in z.iter_mut().zip(&f.a) {
                        *zi += ai;
                    }
                    (labels_from_attack(&f.a, LABEL_EPSILON), Some(f))
                }
                None => (vec![0; grid.n_meters()], None),
            };
            Ok(LabeledSample {
                id,
                z,
                y,
                fdia,
                x_true: x,
            })
        })
        .collect();
    let mut samples = samples?;
    samples.shuffle(&mut stream(config.seed, "shuffle", 0));

    let mut meta = DatasetMeta {
        version: 1,
        seed: config.seed,
        case_name: grid.case_name.clone(),
        n_meters: grid.n_meters(),
        n_normal: 0,
        n_attacked: 0,
        counts_per_scale: BTreeMap::new(),
        noise_sigma: sigma,
        split: "all".into(),
    };
    recount(&mut meta, &samples);
    Ok(Dataset { samples, meta })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

/// Write `meta.json`, `measurements.csv`, `labels.csv`, `attacks.csv` and
/// `states.csv` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = ds.n_meters();
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&ds.meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut zw = csv_writer(&dir.join("measurements.csv"))?;
    let mut yw = csv_writer(&dir.join("labels.csv"))?;
    let mut xw = csv_writer(&dir.join("states.csv"))?;
    let mut aw = csv_writer(&dir.join("attacks.csv"))?;
    let mut zh = vec!["id".to_string()];
    zh.extend(header("z", m));
    zw.write_record(&zh)?;
    yw.write_record(header("y", m))?;
    let n_state = ds.samples.first().map_or(0, |s| s.x_true.len());
    xw.write_record(header("x", n_state))?;
    aw.write_record(["sample", "c", "scale_variance"])?;

    for (i, s) in ds.samples.iter().enumerate() {
        let mut row = vec![s.id.to_string()];
        row.extend(s.z.iter().map(|v| v.to_string()));
        zw.write_record(&row)?;
        yw.write_record(s.y.iter().map(|v| v.to_string()))?;
        xw.write_record(s.x_true.iter().map(|v| v.to_string()))?;
        if let Some(f) = &s.fdia {
            let sparse: Vec<String> = f
                .target_indices
                .iter()
                .map(|t| format!("{t}:{}", f.c[*t]))
                .collect();
            aw.write_record([i.to_string(), sparse.join(";"), f.scale_variance.to_string()])?;
        }
    }
    for w in [&mut zw, &mut yw, &mut xw, &mut aw] {
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad number {s:?} in {what}")))
}

/// Read a dataset written by [`save_dataset`]. The grid recomputes `a = H c`.
pub fn load_dataset(dir: &Path, grid: &GridModel) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    if meta.n_meters != grid.n_meters() {
        return Err(Error::Shape(format!(
            "dataset has {} meters, grid has {}",
            meta.n_meters,
            grid.n_meters()
        )));
    }

    let mut samples = Vec::new();
    for rec in csv_reader(&dir.join("measurements.csv"))?.records() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Validation("missing sample id".into()))?;
        let z = rec
            .iter()
            .skip(1)
            .map(|v| parse_f64(v, "measurements.csv"))
            .collect::<Result<Vec<_>>>()?;
        if z.len() != meta.n_meters {
            return Err(Error::Shape(format!("measurement row {id} has {} entries", z.len())));
        }
        samples.push(LabeledSample {
            id,
            z,
            y: Vec::new(),
            fdia: None,
            x_true: Vec::new(),
        });
    }
    for (s, rec) in samples.iter_mut().zip(csv_reader(&dir.join("labels.csv"))?.records()) {
        s.y = rec?
            .iter()
            .map(|v| match v.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Validation(format!("bad label {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
    }
    let states = dir.join("states.csv");
    if states.exists() {
        for (s, rec) in samples.iter_mut().zip(csv_reader(&states)?.records()) {
            s.x_true = rec?
                .iter()
                .map(|v| parse_f64(v, "states.csv"))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    for rec in csv_reader(&dir.join("attacks.csv"))?.records() {
        let rec = rec?;
        let idx: usize = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Validation("bad sample index in attacks.csv".into()))?;
        let sample = samples
            .get_mut(idx)
            .ok_or_else(|| Error::Validation(format!("attacks.csv references sample {idx}")))?;
        let mut c = vec![0.0; grid.n_state];
        for pair in rec.get(1).unwrap_or("").split(';').filter(|p| !p.is_empty()) {
            let (i, v) = pair
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("bad sparse entry {pair:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::Validation(format!("bad state index {i:?}")))?;
            *c.get_mut(i)
                .ok_or_else(|| Error::Validation(format!("state index {i} out of range")))? =
                parse_f64(v, "attacks.csv")?;
        }
        let nu2 = parse_f64(rec.get(2).unwrap_or(""), "attacks.csv")?;
        sample.fdia = Some(FdiaSpec::from_state_error(grid, c, nu2));
    }
    let mut ds = Dataset { samples, meta };
    let declared = (ds.meta.n_normal, ds.meta.n_attacked);
    recount(&mut ds.meta, &ds.samples);
    if declared != (ds.meta.n_normal, ds.meta.n_attacked) {
        return Err(Error::Validation(
            "class counts in meta.json disagree with the sample files".into(),
        ));
    }
    Ok(ds)
}
