//! A small 1-D CNN stack with exact reverse-mode gradients, used as the
//! multi-label attack locator.

mod arch;
mod layers;
mod model;
mod optim;
mod train;

pub use arch::{ArchitectureSpec, FinalActivation, LayerSpec, Padding, BN_EPSILON, BN_MOMENTUM, LEAKY_SLOPE};
pub use model::{
    labels_from_confidence, labels_from_logits, sigmoid, ForwardPass, Gradients, LossSpec, Mode,
    ModelFile, NalModel, NamedTensor, RunningStats, TrainingMeta, MODEL_JSON_VERSION,
};
pub use optim::Adam;
pub use train::{
    evaluate, evaluate_samples, predict_many, score, smoothed_is_monotone, train, Accuracy,
    TrainConfig, TrainReport,
};
