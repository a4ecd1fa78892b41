//! Adaptive event sampling with recurrent convolutional spiking neurons.
//!
//! Event streams are binned into short count frames, fed through a per-pixel
//! spiking sampler whose spikes close per-neuron sampling windows, and the
//! potentials inside each window are summed into a fixed number of embedding
//! slots for a downstream detector.

pub mod config;
pub mod event;
pub mod grad;
pub mod harness;
pub mod neuron;
pub mod repr;
pub mod run;
pub mod sampler;
pub mod tensor;

pub use config::{ConfigError, RunConfig};
pub use event::{Event, EventError, EventStream, SensorSize, StatsReport};
pub use neuron::{LifParams, NeuronState, ResetMode, SurrogateKind, SurrogateSpec};
pub use repr::{FrameSequence, FrameTensor, ReprError, TimeWindow};
pub use run::{train_run, RunError};
pub use tensor::{ConvGeometry, Tensor};
pub use grad::{Checkpoint, GradError, ParamSet, SpikeMode, Tape};
pub use harness::{
    EvalReport, MetricRecord, Frontend, HarnessError, Model, ModelConfig, OpCounter, Prediction, SceneConfig, ToyAnnotation,
    TrainConfig,
};
pub use sampler::{EmbeddingSequence, SampleWindow, SamplerConfig, SamplerError, SamplerMode, SamplerTrace, SamplerWeights};
