use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{labels_from_logits, LossSpec, Mode, NalModel, TrainingMeta};
use super::optim::Adam;
use crate::fdia::{Dataset, LabeledSample};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub meter: f64,
    pub row: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Measured on the validation set when one is given, else on the
    /// training set.
    pub meter_accuracy: f64,
    pub row_accuracy: f64,
    pub loss_trace: Vec<f64>,
    /// False when the 5-epoch moving average of the loss ever rises.
    pub smoothed_loss_monotone: bool,
}

fn check_labels(data: &Dataset, m: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    for s in &data.samples {
        if s.z.len() != m || s.y.len() != m {
            return Err(Error::Shape(format!(
                "sample {} has width {}/{}, model expects {m}",
                s.id,
                s.z.len(),
                s.y.len()
            )));
        }
    }
    Ok(())
}

pub fn smoothed_is_monotone(trace: &[f64], window: usize) -> bool {
    if trace.len() < window {
        return true;
    }
    let means: Vec<f64> = trace
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    means.windows(2).all(|w| w[1] <= w[0])
}

/// Minimize mean binary cross-entropy with Adam on shuffled mini-batches.
/// The input standardization is refitted to `data` first.
pub fn train(
    model: &mut NalModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let m = model.n_meters();
    check_labels(data, m)?;
    if config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("epochs, batch size and lr must be positive".into()));
    }
    model.fit_standardization(data.samples.iter().map(|s| s.z.as_slice()));
    model.mode = Mode::Train;
    let mut adam = Adam::for_params(config.lr, &model.params());
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut inputs = Vec::with_capacity(config.batch_size * m);
    let mut targets = Vec::with_capacity(config.batch_size * m);

    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(config.seed, "epoch", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            inputs.clear();
            targets.clear();
            for &i in chunk {
                inputs.extend_from_slice(&data.samples[i].z);
                targets.extend(data.samples[i].y.iter().map(|y| f64::from(*y)));
            }
            let as_training = |e: Error| Error::Training {
                epoch,
                msg: e.to_string(),
            };
            let pass = model.forward_batch(&inputs, Mode::Train).map_err(as_training)?;
            let (loss, dlogits) = LossSpec::Bce {
                targets: targets.clone(),
            }
            .value_and_grad(&pass.logits)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "loss is not finite".into(),
                });
            }
            let (grads, _) = model
                .backward_batch(&pass, &dlogits, true, false)
                .map_err(as_training)?;
            model.update_running_stats(&pass);
            adam.update(&mut model.params_mut(), &grads.expect("requested"));
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        trace.push(epoch_loss);
    }
    model.mode = Mode::Eval;
    model.training = Some(TrainingMeta {
        seed: config.seed,
        epochs: config.epochs,
        lr: config.lr,
        batch_size: config.batch_size,
    });
    let acc = evaluate(model, validation.unwrap_or(data))?;
    let monotone = smoothed_is_monotone(&trace, 5);
    if !monotone {
        log::warn!("smoothed training loss rose during training");
    }
    Ok(TrainReport {
        epochs_run: config.epochs,
        final_loss: *trace.last().expect("at least one epoch"),
        meter_accuracy: acc.meter,
        row_accuracy: acc.row,
        loss_trace: trace,
        smoothed_loss_monotone: monotone,
    })
}

/// Eval-mode labels for many samples, computed in batches.
pub fn predict_many(model: &NalModel, samples: &[&[f64]]) -> Result<Vec<Vec<u8>>> {
    let m = model.n_meters();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let mut inputs = Vec::with_capacity(chunk.len() * m);
        for z in chunk {
            if z.len() != m {
                return Err(Error::Shape(format!("measurement has {} entries, expected {m}", z.len())));
            }
            inputs.extend_from_slice(z);
        }
        let logits = model.logits_batch(&inputs)?;
        out.extend(logits.chunks(m).map(labels_from_logits));
    }
    Ok(out)
}

/// Meter and row accuracy of `predicted` against `truth`.
pub fn score(predicted: &[Vec<u8>], truth: &[&[u8]]) -> Accuracy {
    let mut right = 0usize;
    let mut total = 0usize;
    let mut rows = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        let ok = p.iter().zip(t.iter()).filter(|(a, b)| a == b).count();
        right += ok;
        total += t.len();
        rows += usize::from(ok == t.len());
    }
    if predicted.is_empty() {
        return Accuracy { meter: 1.0, row: 1.0 };
    }
    Accuracy {
        meter: right as f64 / total as f64,
        row: rows as f64 / predicted.len() as f64,
    }
}

pub fn evaluate(model: &NalModel, data: &Dataset) -> Result<Accuracy> {
    evaluate_samples(model, &data.samples)
}

pub fn evaluate_samples(model: &NalModel, samples: &[LabeledSample]) -> Result<Accuracy> {
    let zs: Vec<&[f64]> = samples.iter().map(|s| s.z.as_slice()).collect();
    let ys: Vec<&[u8]> = samples.iter().map(|s| s.y.as_slice()).collect();
    let pred = predict_many(model, &zs)?;
    Ok(score(&pred, &ys))
}
