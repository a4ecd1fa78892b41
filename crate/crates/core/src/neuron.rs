//! Discrete leaky integrate-and-fire dynamics and surrogate derivatives.
//!
//! One step, with `r = Δt_s / τ_m`:
//!
//! ```text
//! u[t] = (1 - r) · v[t-1] + r · I[t]
//! s[t] = 1 if u[t] ≥ θ else 0
//! v[t] = u[t] - θ·s[t]                         (soft reset)
//! v[t] = u[t]·(1 - s[t]) + u_reset·s[t]        (hard reset)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("non-finite input current {value} at step {step}")]
    NonFiniteInput { step: usize, value: f64 },
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("input sequence is empty")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    Soft,
    #[default]
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Leak factor `γ = 1 - Δt_s/τ_m`.
    pub decay: f64,
    /// Input gain `Δt_s/τ_m`.
    pub gain: f64,
    pub threshold: f64,
    pub u_reset: f64,
    pub reset: ResetMode,
}

impl LifParams {
    /// Parameters from the ratio `Δt_s/τ_m` in `(0, 1]`.
    pub fn from_ratio(
        dt_over_tau: f64,
        threshold: f64,
        reset: ResetMode,
        u_reset: f64,
    ) -> Result<Self, NeuronError> {
        let p = Self {
            decay: 1.0 - dt_over_tau,
            gain: dt_over_tau,
            threshold,
            u_reset,
            reset,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(NeuronError::InvalidParams(format!(
                "decay {} outside [0, 1)",
                self.decay
            )));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(NeuronError::InvalidParams(format!(
                "threshold {} must be positive",
                self.threshold
            )));
        }
        if !self.gain.is_finite() || !self.u_reset.is_finite() {
            return Err(NeuronError::InvalidParams("gain and u_reset must be finite".into()));
        }
        Ok(())
    }
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            decay: 0.5,
            gain: 0.5,
            threshold: 1.0,
            u_reset: 0.0,
            reset: ResetMode::Hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NeuronState {
    /// Post-reset potential carried to the next step.
    pub v: f64,
    /// Pre-reset potential of the current step.
    pub u: f64,
    pub spike: bool,
    /// Number of steps taken so far.
    pub step: usize,
    /// 1-based step of the most recent spike.
    pub last_spike_step: Option<usize>,
}

#[inline]
pub fn reset(u: f64, spike: bool, params: &LifParams) -> f64 {
    let s = if spike { 1.0 } else { 0.0 };
    match params.reset {
        ResetMode::Soft => u - params.threshold * s,
        ResetMode::Hard => u * (1.0 - s) + params.u_reset * s,
    }
}

pub fn lif_step(
    state: &NeuronState,
    input: f64,
    params: &LifParams,
) -> Result<NeuronState, NeuronError> {
    if !input.is_finite() {
        return Err(NeuronError::NonFiniteInput {
            step: state.step + 1,
            value: input,
        });
    }
    let u = params.decay * state.v + params.gain * input;
    let spike = u >= params.threshold;
    let step = state.step + 1;
    Ok(NeuronState {
        v: reset(u, spike, params),
        u,
        spike,
        step,
        last_spike_step: if spike { Some(step) } else { state.last_spike_step },
    })
}

/// Runs [`lif_step`] from rest over `inputs`; returns spikes and pre-reset potentials.
pub fn lif_run(inputs: &[f64], params: &LifParams) -> Result<(Vec<bool>, Vec<f64>), NeuronError> {
    if inputs.is_empty() {
        return Err(NeuronError::EmptyInput);
    }
    let mut state = NeuronState::default();
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut potentials = Vec::with_capacity(inputs.len());
    for &i in inputs {
        state = lif_step(&state, i, params)?;
        spikes.push(state.spike);
        potentials.push(state.u);
    }
    Ok((spikes, potentials))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    #[default]
    Triangular,
    Rectangular,
    Atan,
}

/// Surrogate derivative `h_α` substituted for `dΘ/du` in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub alpha: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Triangular,
            alpha: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(NeuronError::InvalidParams(format!(
                "surrogate width {} must be positive",
                self.alpha
            )));
        }
        Ok(())
    }

    /// `h_α(x)`:
    /// - triangular: `max(0, 1 - |x|/α) / α`
    /// - rectangular: `1/(2α)` on `|x| < α`
    /// - atan: `(α/2) / (1 + (π α x / 2)²)`, the derivative of
    ///   `1/2 + atan(π α x / 2)/π`; here `α` is a sharpness, not a width.
    ///
    /// All three integrate to 1.
    pub fn eval(&self, x: f64) -> f64 {
        let a = self.alpha;
        match self.kind {
            SurrogateKind::Triangular => (1.0 - x.abs() / a).max(0.0) / a,
            SurrogateKind::Rectangular => {
                if x.abs() < a {
                    0.5 / a
                } else {
                    0.0
                }
            }
            SurrogateKind::Atan => {
                let z = std::f64::consts::FRAC_PI_2 * a * x;
                0.5 * a / (1.0 + z * z)
            }
        }
    }

    /// Antiderivative of [`eval`](Self::eval) with limits 0 and 1: a smooth
    /// step whose derivative is exactly `h_α`. Used only to build a relaxed,
    /// differentiable forward pass for gradient verification.
    pub fn relaxed_step(&self, x: f64) -> f64 {
        let a = self.alpha;
        match self.kind {
            SurrogateKind::Triangular => {
                if x <= -a {
                    0.0
                } else if x <= 0.0 {
                    (x + a) * (x + a) / (2.0 * a * a)
                } else if x < a {
                    1.0 - (a - x) * (a - x) / (2.0 * a * a)
                } else {
                    1.0
                }
            }
            SurrogateKind::Rectangular => ((x + a) / (2.0 * a)).clamp(0.0, 1.0),
            SurrogateKind::Atan => {
                0.5 + (std::f64::consts::FRAC_PI_2 * a * x).atan() / std::f64::consts::PI
            }
        }
    }
}

pub fn surrogate_eval(spec: &SurrogateSpec, x: f64) -> f64 {
    spec.eval(x)
}
