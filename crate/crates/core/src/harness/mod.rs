//! Synthetic detection task, toy detection head, training, evaluation and
//! energy accounting.

pub mod energy;
pub mod fdcheck;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod synth;
pub mod train;

use thiserror::Error;

use crate::grad::GradError;
use crate::repr::ReprError;
use crate::sampler::SamplerError;

pub use energy::{
    count_ops, energy_estimate, energy_mj, model_ops, total_ops, ModuleOps, OpCounter, ReferenceRow, REFERENCE_BREAKDOWN,
};
pub use fdcheck::detector_gradcheck;
pub use metrics::{evaluate, iou, EvalReport};
pub use model::{
    init_params, predict, prepare_input, Frontend, HeadConfig, Model, ModelConfig, ModelInput, Prediction,
};
pub use probe::{tm_robustness_probe, ProbeCell};
pub use synth::{gen_dataset, gen_synthetic, Sample, SceneConfig, ShapeKind, SynthError, ToyAnnotation};
pub use train::{
    evaluate_params, prepare_samples, train, train_epoch, MetricRecord, ModelEval, PreparedSample, TrainConfig,
    TrainState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Grad(#[from] GradError),
}
