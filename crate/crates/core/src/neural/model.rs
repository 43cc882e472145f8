use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerSpec};
use super::layers::{
    flatten, leaky_relu_backward, leaky_relu_forward, unflatten, Act, BatchNorm1d, BnCache,
    Conv1d, Linear,
};
use crate::rng::stream;
use crate::{Error, Result};

pub const MODEL_JSON_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(Conv1d),
    BatchNorm(BatchNorm1d),
    LeakyRelu(f64),
    Fc(Linear),
}

impl Layer {
    fn name(&self, i: usize) -> String {
        let kind = match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Fc(_) => "fc",
        };
        format!("{kind}{i}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NalModel {
    pub case_name: String,
    pub arch: ArchitectureSpec,
    /// Per-meter standardization applied before the first layer.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub mode: Mode,
    pub training: Option<TrainingMeta>,
    pub(crate) layers: Vec<Layer>,
}

enum LayerCache {
    Conv { cols: Vec<f64> },
    BatchNorm(BnCache),
    LeakyRelu { input: Act },
    Fc { features: Vec<f64>, ch: usize },
}

/// Everything a backward pass needs from the matching forward pass.
pub struct ForwardPass {
    pub batch: usize,
    pub mode: Mode,
    /// `batch x m` pre-sigmoid outputs, sample-major.
    pub logits: Vec<f64>,
    caches: Vec<LayerCache>,
}

/// A scalar loss on `batch x m` logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Mean binary cross-entropy with logits against 0/1 targets.
    Bce { targets: Vec<f64> },
    /// `sum_j w_j * logit_j`.
    Linear { weights: Vec<f64> },
    /// A constant; every gradient is zero.
    Constant(f64),
    Scaled(f64, Box<LossSpec>),
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl LossSpec {
    pub fn value_and_grad(&self, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let check = |n: usize| {
            if n != logits.len() {
                Err(Error::Shape(format!("loss expects {n} logits, got {}", logits.len())))
            } else {
                Ok(())
            }
        };
        match self {
            LossSpec::Bce { targets } => {
                check(targets.len())?;
                let n = logits.len() as f64;
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(logits.len());
                for (u, y) in logits.iter().zip(targets) {
                    loss += u.max(0.0) - u * y + (-u.abs()).exp().ln_1p();
                    grad.push((sigmoid(*u) - y) / n);
                }
                Ok((loss / n, grad))
            }
            LossSpec::Linear { weights } => {
                check(weights.len())?;
                let v = logits.iter().zip(weights).map(|(u, w)| u * w).sum();
                Ok((v, weights.clone()))
            }
            LossSpec::Constant(c) => Ok((*c, vec![0.0; logits.len()])),
            LossSpec::Scaled(s, inner) => {
                let (v, mut g) = inner.value_and_grad(logits)?;
                g.iter_mut().for_each(|x| *x *= s);
                Ok((s * v, g))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// One vector per parameter tensor, in [`NalModel::param_names`] order.
    pub params: Vec<Vec<f64>>,
    /// With respect to the raw (unstandardized) input, `batch x m`.
    pub input: Vec<f64>,
}

/// The (weight, bias) gradient pair just below `slot`, moving `slot` down.
fn take_pair<'a>(
    grads: &'a mut Option<Vec<Vec<f64>>>,
    slot: &mut usize,
) -> Option<(&'a mut [f64], &'a mut [f64])> {
    grads.as_mut().map(|g| {
        *slot -= 2;
        let (a, b) = g.split_at_mut(*slot + 1);
        (a[*slot].as_mut_slice(), b[0].as_mut_slice())
    })
}

fn check_finite(data: &[f64], location: String) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            location,
            msg: "non-finite value".into(),
        })
    }
}

impl NalModel {
    /// Fresh model with uniform fan-in initialization drawn from `seed`.
    pub fn new(case_name: &str, arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, "nal-init", 0);
        let layers = arch
            .layers
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => Layer::Conv(Conv1d::new(in_channels, out_channels, kernel, &mut rng)),
                LayerSpec::BatchNorm {
                    channels,
                    momentum,
                    epsilon,
                } => Layer::BatchNorm(BatchNorm1d::new(channels, momentum, epsilon)),
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                LayerSpec::Fc {
                    in_features,
                    out_features,
                } => Layer::Fc(Linear::new(in_features, out_features, &mut rng)),
            })
            .collect();
        let m = arch.n_meters;
        Ok(NalModel {
            case_name: case_name.to_string(),
            arch,
            input_mean: vec![0.0; m],
            input_std: vec![1.0; m],
            mode: Mode::Eval,
            training: None,
            layers,
        })
    }

    pub fn n_meters(&self) -> usize {
        self.arch.n_meters
    }

    /// Fit the per-meter standardization to a set of inputs.
    pub fn fit_standardization<'a>(&mut self, inputs: impl Iterator<Item = &'a [f64]>) {
        let m = self.n_meters();
        let mut sum = vec![0.0; m];
        let mut sq = vec![0.0; m];
        let mut n = 0usize;
        for z in inputs {
            for j in 0..m {
                sum[j] += z[j];
                sq[j] += z[j] * z[j];
            }
            n += 1;
        }
        if n == 0 {
            return;
        }
        for j in 0..m {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            self.input_mean[j] = mean;
            self.input_std[j] = if std > 1e-12 { std } else { 1.0 };
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let base = layer.name(i);
            match layer {
                Layer::LeakyRelu(_) => {}
                _ => {
                    names.push(format!("{base}.weight"));
                    names.push(format!("{base}.bias"));
                }
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([c.weight.as_slice(), c.bias.as_slice()]),
                Layer::BatchNorm(b) => out.extend([b.gamma.as_slice(), b.beta.as_slice()]),
                Layer::Fc(f) => out.extend([f.weight.as_slice(), f.bias.as_slice()]),
                Layer::LeakyRelu(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([c.weight.as_mut_slice(), c.bias.as_mut_slice()]),
                Layer::BatchNorm(b) => out.extend([b.gamma.as_mut_slice(), b.beta.as_mut_slice()]),
                Layer::Fc(f) => out.extend([f.weight.as_mut_slice(), f.bias.as_mut_slice()]),
                Layer::LeakyRelu(_) => {}
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(vec![c.out_ch, c.in_ch, c.kernel]);
                    out.push(vec![c.out_ch]);
                }
                Layer::BatchNorm(b) => {
                    out.push(vec![b.channels]);
                    out.push(vec![b.channels]);
                }
                Layer::Fc(f) => {
                    out.push(vec![f.out_features, f.in_features]);
                    out.push(vec![f.out_features]);
                }
                Layer::LeakyRelu(_) => {}
            }
        }
        out
    }

    /// Forward a `batch x m` sample-major block. Pure: training-mode batch
    /// statistics are returned in the pass, see [`Self::update_running_stats`].
    pub fn forward_batch(&self, inputs: &[f64], mode: Mode) -> Result<ForwardPass> {
        let m = self.n_meters();
        if inputs.is_empty() || inputs.len() % m != 0 {
            return Err(Error::Shape(format!(
                "input length {} is not a positive multiple of {m}",
                inputs.len()
            )));
        }
        let batch = inputs.len() / m;
        let mut x = Act::zeros(1, batch, m);
        for (i, (v, out)) in inputs.iter().zip(&mut x.data).enumerate() {
            let j = i % m;
            *out = (v - self.input_mean[j]) / self.input_std[j];
        }
        check_finite(&x.data, "input".into())?;
        let train = mode == Mode::Train;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let (y, cols) = c.forward(&x);
                    caches.push(LayerCache::Conv { cols });
                    x = y;
                }
                Layer::BatchNorm(b) => {
                    let (y, cache) = b.forward(&x, train);
                    caches.push(LayerCache::BatchNorm(cache));
                    x = y;
                }
                Layer::LeakyRelu(slope) => {
                    let y = leaky_relu_forward(&x, *slope);
                    caches.push(LayerCache::LeakyRelu { input: x });
                    x = y;
                }
                Layer::Fc(f) => {
                    let features = flatten(&x);
                    logits = f.forward(&features, batch);
                    caches.push(LayerCache::Fc { features, ch: x.ch });
                    check_finite(&logits, layer.name(i))?;
                    continue;
                }
            }
            check_finite(&x.data, layer.name(i))?;
        }
        Ok(ForwardPass {
            batch,
            mode,
            logits,
            caches,
        })
    }

    /// Fold the batch statistics of a training-mode pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (layer, cache) in self.layers.iter_mut().zip(&pass.caches) {
            if let (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) = (layer, cache) {
                b.update_running(c);
            }
        }
    }

    /// Reverse pass for upstream gradient `dlogits` (`batch x m`). Returns
    /// parameter gradients when `want_params` and the raw-input gradient when
    /// `want_input`.
    pub fn backward_batch(
        &self,
        pass: &ForwardPass,
        dlogits: &[f64],
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Vec<Vec<f64>>>, Option<Vec<f64>>)> {
        let m = self.n_meters();
        let batch = pass.batch;
        if dlogits.len() != batch * m {
            return Err(Error::Shape("upstream gradient does not match the pass".into()));
        }
        check_finite(dlogits, "loss".into())?;
        let mut grads: Option<Vec<Vec<f64>>> =
            want_params.then(|| self.params().iter().map(|p| vec![0.0; p.len()]).collect());
        let mut slot = grads.as_ref().map_or(0, |g| g.len());
        let mut dx: Option<Act> = None;
        let mut dlog = Some(dlogits.to_vec());
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            let upstream = match (layer, cache) {
                (Layer::Fc(f), LayerCache::Fc { features, ch }) => {
                    let d = dlog.take().expect("fc is the last layer");
                    let p = take_pair(&mut grads, &mut slot);
                    let df = f.backward(features, &d, batch, p);
                    unflatten(&df, *ch, batch, m)
                }
                (Layer::LeakyRelu(slope), LayerCache::LeakyRelu { input }) => {
                    leaky_relu_backward(input, dx.as_ref().expect("upstream"), *slope)
                }
                (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) => {
                    let p = take_pair(&mut grads, &mut slot);
                    b.backward(c, dx.as_ref().expect("upstream"), p)
                }
                (Layer::Conv(c), LayerCache::Conv { cols }) => {
                    let p = take_pair(&mut grads, &mut slot);
                    let need = i > 0 || want_input;
                    match c.backward((batch, m), cols, dx.as_ref().expect("upstream"), p, need) {
                        Some(d) => d,
                        None => {
                            dx = None;
                            continue;
                        }
                    }
                }
                _ => unreachable!("cache kind follows layer kind"),
            };
            check_finite(&upstream.data, layer.name(i))?;
            dx = Some(upstream);
        }
        if let Some(g) = &grads {
            for (name, v) in self.param_names().iter().zip(g) {
                check_finite(v, name.clone())?;
            }
        }
        let input = if want_input {
            let dx = dx.expect("input gradient requested");
            let mut out = dx.data;
            for (i, v) in out.iter_mut().enumerate() {
                *v /= self.input_std[i % m];
            }
            Some(out)
        } else {
            None
        };
        Ok((grads, input))
    }

    /// Loss and exact gradients for a batch under `mode`.
    pub fn backward(&self, inputs: &[f64], loss: &LossSpec, mode: Mode) -> Result<Gradients> {
        let pass = self.forward_batch(inputs, mode)?;
        let (value, dlogits) = loss.value_and_grad(&pass.logits)?;
        let (params, input) = self.backward_batch(&pass, &dlogits, true, true)?;
        Ok(Gradients {
            loss: value,
            params: params.expect("requested"),
            input: input.expect("requested"),
        })
    }

    /// Logits and confidences for one measurement vector under the current mode.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.n_meters() {
            return Err(Error::Shape(format!(
                "measurement has {} entries, model expects {}",
                z.len(),
                self.n_meters()
            )));
        }
        let logits = self.forward_batch(z, self.mode)?.logits;
        let psi = logits.iter().map(|u| sigmoid(*u)).collect();
        Ok((logits, psi))
    }

    /// Eval-mode logits for a `batch x m` block.
    pub fn logits_batch(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(inputs, Mode::Eval)?.logits)
    }

    pub fn predict_labels(&self, z: &[f64]) -> Result<Vec<u8>> {
        if self.mode != Mode::Eval {
            return Err(Error::Precondition("predict_labels needs an eval-mode model".into()));
        }
        let (logits, _) = self.forward(z)?;
        Ok(labels_from_logits(&logits))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&ModelFile::from_model(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str::<ModelFile>(&text)?.into_model()
    }
}

/// `y_j = [logit_j > 0]`.
pub fn labels_from_logits(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|u| u8::from(*u > 0.0)).collect()
}

/// `y_j = [psi_j > 0.5]`.
pub fn labels_from_confidence(psi: &[f64]) -> Vec<u8> {
    psi.iter().map(|p| u8::from(*p > 0.5)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `model.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub case_name: String,
    pub arch: ArchitectureSpec,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub parameters: BTreeMap<String, NamedTensor>,
    pub bn_running_stats: BTreeMap<String, RunningStats>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

impl ModelFile {
    pub fn from_model(model: &NalModel) -> Self {
        let parameters = model
            .param_names()
            .into_iter()
            .zip(model.param_shapes())
            .zip(model.params())
            .map(|((name, shape), data)| {
                (
                    name,
                    NamedTensor {
                        shape,
                        data: data.to_vec(),
                    },
                )
            })
            .collect();
        let bn_running_stats = model
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::BatchNorm(b) => Some((
                    l.name(i),
                    RunningStats {
                        mean: b.running_mean.clone(),
                        var: b.running_var.clone(),
                    },
                )),
                _ => None,
            })
            .collect();
        ModelFile {
            version: MODEL_JSON_VERSION,
            case_name: model.case_name.clone(),
            arch: model.arch.clone(),
            input_mean: model.input_mean.clone(),
            input_std: model.input_std.clone(),
            parameters,
            bn_running_stats,
            training: model.training.clone(),
        }
    }

    pub fn into_model(self) -> Result<NalModel> {
        if self.version != MODEL_JSON_VERSION {
            return Err(Error::Validation(format!("unsupported model.json version {}", self.version)));
        }
        let mut model = NalModel::new(&self.case_name, self.arch, 0)?;
        let m = model.n_meters();
        if self.input_mean.len() != m || self.input_std.len() != m {
            return Err(Error::Shape("standardization vectors must have length m".into()));
        }
        model.input_mean = self.input_mean;
        model.input_std = self.input_std;
        model.training = self.training;
        let names = model.param_names();
        let shapes = model.param_shapes();
        for ((name, shape), slot) in names.iter().zip(&shapes).zip(model.params_mut()) {
            let t = self
                .parameters
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            if &t.shape != shape || t.data.len() != slot.len() {
                return Err(Error::Shape(format!("parameter {name} has the wrong shape")));
            }
            check_finite(&t.data, name.clone())?;
            slot.copy_from_slice(&t.data);
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let name = layer.name(i);
            if let Layer::BatchNorm(b) = layer {
                let s = self
                    .bn_running_stats
                    .get(&name)
                    .ok_or_else(|| Error::Validation(format!("missing running stats {name}")))?;
                if s.mean.len() != b.channels || s.var.len() != b.channels {
                    return Err(Error::Shape(format!("running stats {name} have the wrong length")));
                }
                b.running_mean = s.mean.clone();
                b.running_var = s.var.clone();
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_model(seed: u64, m: usize) -> NalModel {
        let arch = ArchitectureSpec::conv_stack(m, &[(4, 3), (3, 2)]);
        let mut model = NalModel::new("tiny", arch, seed).unwrap();
        let mut rng = stream(seed, "perturb-bn", 0);
        for layer in &mut model.layers {
            if let Layer::BatchNorm(b) = layer {
                for c in 0..b.channels {
                    b.gamma[c] = rng.random_range(0.5..1.5);
                    b.beta[c] = rng.random_range(-0.3..0.3);
                    b.running_mean[c] = rng.random_range(-0.3..0.3);
                    b.running_var[c] = rng.random_range(0.5..2.0);
                }
            }
        }
        for j in 0..m {
            model.input_mean[j] = rng.random_range(-0.2..0.2);
            model.input_std[j] = rng.random_range(0.5..2.0);
        }
        model
    }

    fn normal_vec(seed: u64, key: &str, n: usize) -> Vec<f64> {
        let mut rng = stream(seed, key, 0);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Independent eval-mode forward pass written with plain nested loops over
    /// the architecture description and the saved parameter tensors.
    fn naive_forward(model: &NalModel, z: &[f64]) -> Vec<f64> {
        let file = ModelFile::from_model(model);
        let m = z.len();
        let mut act: Vec<Vec<f64>> = vec![z
            .iter()
            .enumerate()
            .map(|(j, v)| (v - file.input_mean[j]) / file.input_std[j])
            .collect()];
        for (i, spec) in model.arch.layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { kernel, in_channels, out_channels, .. } => {
                    let w = &file.parameters[&format!("conv{i}.weight")].data;
                    let b = &file.parameters[&format!("conv{i}.bias")].data;
                    let left = (kernel - 1) / 2;
                    let mut out = vec![vec![0.0; m]; out_channels];
                    for o in 0..out_channels {
                        for t in 0..m {
                            let mut acc = b[o];
                            for c in 0..in_channels {
                                for j in 0..kernel {
                                    let s = t as i64 + j as i64 - left as i64;
                                    if s >= 0 && (s as usize) < m {
                                        acc += w[o * in_channels * kernel + c * kernel + j]
                                            * act[c][s as usize];
                                    }
                                }
                            }
                            out[o][t] = acc;
                        }
                    }
                    act = out;
                }
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let g = &file.parameters[&format!("bn{i}.weight")].data;
                    let b = &file.parameters[&format!("bn{i}.bias")].data;
                    let rs = &file.bn_running_stats[&format!("bn{i}")];
                    for (c, row) in act.iter_mut().enumerate() {
                        for v in row.iter_mut() {
                            *v = g[c] * (*v - rs.mean[c]) / (rs.var[c] + epsilon).sqrt() + b[c];
                        }
                    }
                }
                LayerSpec::LeakyRelu { slope } => {
                    for v in act.iter_mut().flatten() {
                        if *v < 0.0 {
                            *v *= slope;
                        }
                    }
                }
                LayerSpec::Fc { in_features, out_features } => {
                    let w = &file.parameters[&format!("fc{i}.weight")].data;
                    let b = &file.parameters[&format!("fc{i}.bias")].data;
                    let flat: Vec<f64> = act.iter().flatten().copied().collect();
                    return (0..out_features)
                        .map(|o| b[o] + (0..in_features).map(|k| w[o * in_features + k] * flat[k]).sum::<f64>())
                        .collect();
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        for seed in 0..10 {
            let model = small_model(seed, 9);
            let z = normal_vec(seed, "z", 9);
            let (logits, psi) = model.forward(&z).unwrap();
            let want = naive_forward(&model, &z);
            for j in 0..9 {
                assert!((logits[j] - want[j]).abs() < 1e-10);
                assert!((psi[j] - 1.0 / (1.0 + (-want[j]).exp())).abs() < 1e-10);
            }
        }
        let big = NalModel::new("case14", ArchitectureSpec::preset(14, 34), 3).unwrap();
        let z = normal_vec(3, "z", 34);
        let got = big.forward(&z).unwrap().0;
        for (a, b) in got.iter().zip(naive_forward(&big, &z)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_parameters_give_half_confidence_and_zero_labels() {
        let mut model = small_model(1, 6);
        for p in model.params_mut() {
            p.fill(0.0);
        }
        let (logits, psi) = model.forward(&normal_vec(1, "z", 6)).unwrap();
        assert!(logits.iter().all(|u| *u == 0.0));
        assert!(psi.iter().all(|p| *p == 0.5));
        assert_eq!(model.predict_labels(&normal_vec(2, "z", 6)).unwrap(), vec![0; 6]);
    }

    #[test]
    fn confidence_threshold_is_strict() {
        assert_eq!(labels_from_confidence(&[0.49, 0.5, 0.51]), vec![0, 0, 1]);
        assert_eq!(labels_from_logits(&[-3.0, 0.0, 1e-3]), vec![0, 0, 1]);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let model = small_model(1, 6);
        assert!(matches!(model.forward(&[0.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(model.forward_batch(&[0.0; 7], Mode::Eval), Err(Error::Shape(_))));
    }

    /// Central difference with step 1e-5. A LeakyReLU kink lying within the
    /// step bends the quotient, so a mismatch is retried once with 1e-7.
    fn fd_agrees(analytic: f64, f: &mut dyn FnMut(f64) -> f64) -> Option<f64> {
        let close = |n: f64| {
            let e = (analytic - n).abs();
            e <= 1e-7 || e <= 1e-4 * analytic.abs().max(n.abs())
        };
        let mut last = 0.0;
        for h in [1e-5, 1e-7] {
            last = (f(h) - f(-h)) / (2.0 * h);
            if close(last) {
                return None;
            }
        }
        Some(last)
    }

    fn fd_check_model(model: &mut NalModel, inputs: &mut [f64], loss: &LossSpec, mode: Mode) {
        let g = model.backward(inputs, loss, mode).unwrap();
        let eval = |model: &NalModel, inputs: &[f64]| {
            let pass = model.forward_batch(inputs, mode).unwrap();
            loss.value_and_grad(&pass.logits).unwrap().0
        };
        for i in 0..inputs.len() {
            let orig = inputs[i];
            let bad = fd_agrees(g.input[i], &mut |h| {
                inputs[i] = orig + h;
                let v = eval(model, inputs);
                inputs[i] = orig;
                v
            });
            assert!(bad.is_none(), "input[{i}]: {} vs {bad:?}", g.input[i]);
        }
        let names = model.param_names();
        for (k, name) in names.iter().enumerate() {
            let len = model.params()[k].len();
            // Large tensors: a deterministic spread of entries.
            let step = (len / 40).max(1);
            for i in (0..len).step_by(step) {
                let orig = model.params()[k][i];
                let bad = fd_agrees(g.params[k][i], &mut |h| {
                    model.params_mut()[k][i] = orig + h;
                    let v = eval(model, inputs);
                    model.params_mut()[k][i] = orig;
                    v
                });
                assert!(bad.is_none(), "{name}[{i}]: {} vs {bad:?}", g.params[k][i]);
            }
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let mut model = small_model(trial, 7);
            let batch = 3;
            let mut inputs = normal_vec(trial, "x", 7 * batch);
            let targets: Vec<f64> = normal_vec(trial, "y", 7 * batch)
                .iter()
                .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
            fd_check_model(&mut model, &mut inputs, &LossSpec::Bce { targets }, mode);
        }
    }

    #[test]
    fn preset_stacks_pass_gradient_checks() {
        for (n_bus, m) in [(14, 34), (30, 71)] {
            for mode in [Mode::Train, Mode::Eval] {
                let mut model =
                    NalModel::new("preset", ArchitectureSpec::preset(n_bus, m), n_bus as u64).unwrap();
                let mut inputs = normal_vec(n_bus as u64, "x", 2 * m);
                let weights = normal_vec(n_bus as u64, "w", 2 * m);
                fd_check_model(&mut model, &mut inputs, &LossSpec::Linear { weights }, mode);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_input_gradient_and_scaling_is_linear() {
        let model = small_model(4, 6);
        let z = normal_vec(4, "z", 12);
        let g = model.backward(&z, &LossSpec::Constant(3.0), Mode::Eval).unwrap();
        assert!(g.input.iter().all(|v| *v == 0.0));
        let base = LossSpec::Bce { targets: vec![1.0; 12] };
        let g1 = model.backward(&z, &base, Mode::Train).unwrap();
        let g2 = model
            .backward(&z, &LossSpec::Scaled(2.0, Box::new(base)), Mode::Train)
            .unwrap();
        for (a, b) in g1.input.iter().zip(&g2.input) {
            assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300);
        }
        for (pa, pb) in g1.params.iter().zip(&g2.params) {
            for (a, b) in pa.iter().zip(pb) {
                assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn eval_predictions_do_not_mutate_the_model() {
        let model = small_model(5, 6);
        let before = model.clone();
        let z = normal_vec(5, "z", 6);
        let a = model.predict_labels(&z).unwrap();
        let b = model.predict_labels(&z).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, before);
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let model = small_model(5, 6);
        let mut z = vec![0.0; 6];
        z[2] = f64::NAN;
        assert!(matches!(model.forward(&z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn model_json_round_trip() {
        let model = small_model(6, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let back = NalModel::load_json(&path).unwrap();
        assert_eq!(back, model);
    }
}
