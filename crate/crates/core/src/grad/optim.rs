//! Named parameter sets, per-parameter gradients, Adam and EMA.

use serde::{Deserialize, Serialize};

use super::tape::{GradError, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors. Parameter `i` is registered on a tape
/// as `Tape::param(i, ..)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Registers every tensor as a tape parameter, in order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect()
    }

    /// Rounds every entry to the nearest `f32`, so a checkpoint round trip
    /// is lossless.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Per-parameter gradient of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros(params: &ParamSet) -> Self {
        Self {
            loss: 0.0,
            grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Collects tape gradients; parameters that did not reach the loss get zeros.
    pub fn from_tape(grads: &Gradients, params: &ParamSet, loss: f64) -> Self {
        let mut out = Self::zeros(params);
        out.loss = loss;
        for (i, g) in out.grads.iter_mut().enumerate() {
            if let Some(src) = grads.param(i) {
                g.data_mut().copy_from_slice(src);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        self.loss += other.loss;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.loss *= factor;
        for g in &mut self.grads {
            g.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

fn check_layout(params: &ParamSet, grads: &GradientSet) -> Result<(), GradError> {
    if params.len() != grads.grads.len()
        || params
            .tensors()
            .iter()
            .zip(&grads.grads)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(GradError::ShapeMismatch("gradients do not match parameters".into()));
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradientSet,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<(), GradError> {
    check_layout(params, grads)?;
    if !state.m.same_layout(params) || !state.v.same_layout(params) {
        return Err(GradError::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads.grads[i].data();
        let m = state.m.tensors_mut()[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v.tensors_mut()[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m.get(i).data(), state.v.get(i).data());
        let p = params.tensors_mut()[i].data_mut();
        for j in 0..p.len() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow = momentum·shadow + (1 - momentum)·params`
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, momentum: f64) -> Result<(), GradError> {
    if !shadow.same_layout(params) {
        return Err(GradError::ShapeMismatch("EMA shadow does not match parameters".into()));
    }
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

/// Shadow weights with a momentum ramp `m·(1 - e^{-n/ramp})`, so early
/// updates are not dominated by the initial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &ParamSet, momentum: f64, ramp: f64) -> Result<(), GradError> {
        self.updates += 1;
        let m = if ramp > 0.0 {
            momentum * (1.0 - (-(self.updates as f64) / ramp).exp())
        } else {
            momentum
        };
        ema_update(&mut self.shadow, params, m)
    }
}
