//! Per-pixel spiking sampler: every `(x, y, p)` location owns a LIF neuron fed
//! by convolutions over the early-aggregated count frames. Spikes close
//! per-neuron sampling windows whose summed potentials form the embedding.

mod embedding;
mod forward;
mod windows;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuron::{ResetMode, SurrogateSpec};
use crate::tensor::Tensor;

pub use embedding::{read_embedding, write_embedding, EmbeddingManifest, EmbeddingSequence};
pub use forward::{record_embedding, record_sampler, sampler_forward, SamplerTrace, SamplerVars};
pub use windows::{
    adaptive_plan, aggregate_windows, extract_windows, fixed_plan, plan_from_windows,
    sample_events, spike_windows, SampleWindow,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation at step {step}")]
    NonFiniteActivation { step: usize },
    #[error("slot count must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding i/o: {0}")]
    Io(String),
}

/// Sampler variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Feedforward conv input, constant decay, fixed step windows.
    Snn,
    /// Recurrent input and sigmoid decay gate, fixed step windows.
    Rsnn,
    /// Recurrent neurons whose spikes choose the windows.
    #[default]
    Arsnn,
}

impl SamplerMode {
    pub fn is_recurrent(self) -> bool {
        !matches!(self, SamplerMode::Snn)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, SamplerMode::Arsnn)
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Snn => "snn",
            SamplerMode::Rsnn => "rsnn",
            SamplerMode::Arsnn => "arsnn",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "snn" => Ok(SamplerMode::Snn),
            "rsnn" => Ok(SamplerMode::Rsnn),
            "arsnn" => Ok(SamplerMode::Arsnn),
            other => Err(SamplerError::InvalidConfig(format!("unknown sampler mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Odd square kernel size; padding `kernel / 2` keeps `H × W`.
    pub kernel: usize,
    pub threshold: f64,
    /// Embedding slots `K`.
    pub slots: usize,
    /// Residual potential dropout.
    pub rpd: bool,
    /// Spike-aware training.
    pub sat: bool,
    pub surrogate: SurrogateSpec,
    /// Constant decay of the non-recurrent variant.
    pub snn_decay: f64,
    pub reset: ResetMode,
    pub u_reset: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Arsnn,
            kernel: 3,
            threshold: 1.0,
            slots: 3,
            rpd: true,
            sat: true,
            surrogate: SurrogateSpec::default(),
            snn_decay: 0.5,
            reset: ResetMode::Hard,
            u_reset: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.slots == 0 {
            return Err(SamplerError::InvalidK(0));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return bad(format!("threshold must be positive, got {}", self.threshold));
        }
        if !(0.0..1.0).contains(&self.snn_decay) {
            return bad(format!("decay must lie in [0, 1), got {}", self.snn_decay));
        }
        if !self.u_reset.is_finite() {
            return bad("reset potential must be finite".into());
        }
        self.surrogate
            .validate()
            .map_err(|e| SamplerError::InvalidConfig(e.to_string()))
    }
}

/// Convolution kernels `(out=2, in=2, k, k)` and per-polarity biases.
/// The non-recurrent variant uses only `w_in_ff` and `b_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerWeights {
    pub w_in_ff: Tensor,
    pub w_in_rec: Tensor,
    pub b_in: Tensor,
    pub w_gate_ff: Tensor,
    pub w_gate_rec: Tensor,
    pub b_gate: Tensor,
}

pub const SAMPLER_PARAM_NAMES: [&str; 6] = [
    "sampler.w_in_ff",
    "sampler.w_in_rec",
    "sampler.b_in",
    "sampler.w_gate_ff",
    "sampler.w_gate_rec",
    "sampler.b_gate",
];

impl SamplerWeights {
    pub fn zeros(kernel: usize) -> Self {
        let k = [2, 2, kernel, kernel];
        Self {
            w_in_ff: Tensor::zeros(&k),
            w_in_rec: Tensor::zeros(&k),
            b_in: Tensor::zeros(&[2]),
            w_gate_ff: Tensor::zeros(&k),
            w_gate_rec: Tensor::zeros(&k),
            b_gate: Tensor::zeros(&[2]),
        }
    }

    /// Identity centre tap on the input kernel, small uniform noise elsewhere.
    pub fn init(kernel: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(kernel);
        let scale = 0.05;
        for t in [&mut w.w_in_ff, &mut w.w_in_rec, &mut w.w_gate_ff, &mut w.w_gate_rec] {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        let centre = (kernel / 2) * kernel + kernel / 2;
        let kk = kernel * kernel;
        for c in 0..2 {
            w.w_in_ff.data_mut()[(c * 2 + c) * kk + centre] += 1.0;
        }
        w
    }

    pub fn kernel(&self) -> usize {
        self.w_in_ff.shape()[2]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.w_in_ff,
            &self.w_in_rec,
            &self.b_in,
            &self.w_gate_ff,
            &self.w_gate_rec,
            &self.b_gate,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_in_ff,
            &mut self.w_in_rec,
            &mut self.b_in,
            &mut self.w_gate_ff,
            &mut self.w_gate_rec,
            &mut self.b_gate,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, SamplerError> {
        let [w_in_ff, w_in_rec, b_in, w_gate_ff, w_gate_rec, b_gate]: [Tensor; 6] = tensors
            .try_into()
            .map_err(|v: Vec<Tensor>| SamplerError::ShapeMismatch(format!("expected 6 tensors, got {}", v.len())))?;
        let w = Self {
            w_in_ff,
            w_in_rec,
            b_in,
            w_gate_ff,
            w_gate_rec,
            b_gate,
        };
        w.validate(w.kernel())?;
        Ok(w)
    }

    pub fn validate(&self, kernel: usize) -> Result<(), SamplerError> {
        let k = [2, 2, kernel, kernel];
        for (name, t) in SAMPLER_PARAM_NAMES.iter().zip(self.tensors()) {
            let want: &[usize] = if name.contains(".b_") { &[2] } else { &k };
            if t.shape() != want {
                return Err(SamplerError::ShapeMismatch(format!(
                    "{name}: expected {want:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(SamplerError::InvalidConfig(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}
