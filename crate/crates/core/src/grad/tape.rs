//! Reverse-mode tape over the handful of tensor primitives the sampler and
//! the toy head are built from.
//!
//! Nodes are appended in execution order, so node ids are already a
//! topological order and [`Tape::backward`] is a single reverse sweep. Spike
//! nodes record their hard `u ≥ θ` decisions; the backward pass substitutes
//! the surrogate `h_α(u - θ)` for the Heaviside derivative. Window boundaries
//! are fixed at record time from those decisions and carry no gradient.

use std::rc::Rc;

use thiserror::Error;

use crate::neuron::SurrogateSpec;
use crate::tensor::{conv2d, conv2d_backward, ConvGeometry, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("loss does not depend on any parameter")]
    DisconnectedLoss,
    #[error("loss node must be a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every tested coordinate flipped a discrete decision ({skipped} skipped)")]
    AllCoordinatesUnstable { skipped: usize },
}

/// How spike nodes behave in the forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Hard threshold forward, surrogate derivative backward (training).
    #[default]
    Surrogate,
    /// Hard threshold forward, zero derivative backward: the exact gradient of
    /// the piecewise-smooth forward function away from threshold crossings.
    Exact,
    /// Smooth-step forward `∫h_α`, surrogate backward: the exact gradient of a
    /// relaxed forward. Window boundaries still follow the hard decisions.
    Relaxed,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One term of a window aggregation: neuron `neuron` adds
/// `factor · Σ_{t=first..=last} u_t` into `slot`, where `factor` is the spike
/// value at `spike_step` when present (spike-aware aggregation) and 1 otherwise.
/// Steps are 0-based indices into the aggregated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationTerm {
    pub neuron: u32,
    pub slot: u16,
    pub first: u16,
    pub last: u16,
    pub spike_step: Option<u16>,
}

/// Which potentials are summed into which embedding slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationPlan {
    pub slots: usize,
    pub neurons: usize,
    pub steps: usize,
    pub terms: Vec<AggregationTerm>,
}

/// Box regression target in normalized `[0, 1]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTarget {
    pub present: bool,
    pub boxn: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub box_weight: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            box_weight: 5.0,
            smooth_l1_beta: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, geom: ConvGeometry },
    ChannelBias { x: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Spike { u: Var, theta: f64, surrogate: SurrogateSpec, hard: Vec<bool> },
    HardReset { u: Var, s: Var, u_reset: f64 },
    SoftReset { u: Var, s: Var, theta: f64 },
    Aggregate { us: Vec<Var>, ss: Vec<Var>, plan: Rc<AggregationPlan>, sat: bool },
    Select { x: Var, index: usize },
    Mean(Vec<Var>),
    AdaptivePool { x: Var, grid: usize },
    Linear { x: Var, w: Var, b: Var },
    DetectionLoss { logits: Var, target: LossTarget, cfg: LossConfig },
    WeightedSum { x: Var, weights: Vec<f64> },
    Concat(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    scope: &'static str,
}

/// A synaptic operation recorded on the tape, for operation counting.
#[derive(Debug, Clone, Copy)]
pub struct SynapticOp<'a> {
    pub scope: &'static str,
    pub input: &'a Tensor,
    pub kind: SynapticKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynapticKind {
    Conv(ConvGeometry),
    Linear { outputs: usize },
}

/// Gradient of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of parameter `index`, or `None` if it did not reach the loss.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(i, _)| *i == index)
            .and_then(|(_, v)| self.get(*v))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: SpikeMode,
    decisions: Vec<bool>,
    scope: &'static str,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Detection loss on raw logits `[objectness, cx, cy, w, h]`: binary
/// cross-entropy on objectness plus weighted smooth-L1 between the sigmoid of
/// the box logits and the normalized target box (present objects only).
pub fn detection_loss_from_logits(logits: &[f64], target: &LossTarget, cfg: &LossConfig) -> f64 {
    if !target.present {
        return softplus(logits[0]);
    }
    let box_term: f64 = (0..4)
        .map(|i| smooth_l1(sigmoid(logits[i + 1]) - target.boxn[i], cfg.smooth_l1_beta))
        .sum();
    softplus(-logits[0]) + cfg.box_weight * box_term
}

impl Tape {
    pub fn new(mode: SpikeMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            decisions: Vec::new(),
            scope: "",
        }
    }

    /// Labels subsequently recorded nodes, for [`Tape::synaptic_ops`].
    pub fn set_scope(&mut self, scope: &'static str) {
        self.scope = scope;
    }

    /// Convolutions and linear layers in recording order.
    pub fn synaptic_ops(&self) -> Vec<SynapticOp<'_>> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let (x, kind) = match &n.op {
                    Op::Conv { x, geom, .. } => (*x, SynapticKind::Conv(*geom)),
                    Op::Linear { x, .. } => (
                        *x,
                        SynapticKind::Linear {
                            outputs: n.value.len(),
                        },
                    ),
                    _ => return None,
                };
                Some(SynapticOp {
                    scope: n.scope,
                    input: self.value(x),
                    kind,
                })
            })
            .collect()
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Every discrete decision taken so far (spike thresholds and ReLU signs),
    /// in recording order.
    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    /// Hard `u ≥ θ` decisions of a spike node.
    pub fn spike_decisions(&self, v: Var) -> &[bool] {
        match &self.nodes[v.0].op {
            Op::Spike { hard, .. } => hard,
            _ => panic!("node {} is not a spike node", v.0),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(Op::Param(index), value, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Var {
        let out = conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let shape = [geom.out_channels, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Conv { x, w, geom }, Tensor::from_vec(&shape, out), rg)
    }

    /// Adds `b[c]` to every element of channel `c` of a `(C, ...)` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b).data();
        let plane = xv.len() / bv.len();
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::ChannelBias { x, b }, out, rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        self.decisions.extend(xv.data().iter().map(|&v| v > 0.0));
        let out = xv.map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg)
    }

    /// Spike generation `s = Θ(u - θ)`.
    pub fn spike(&mut self, u: Var, theta: f64, surrogate: SurrogateSpec) -> Var {
        let uv = self.value(u);
        let hard: Vec<bool> = uv.data().iter().map(|&x| x >= theta).collect();
        let out = match self.mode {
            SpikeMode::Relaxed => uv.map(|x| surrogate.relaxed_step(x - theta)),
            _ => Tensor::from_vec(
                uv.shape(),
                hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ),
        };
        self.decisions.extend_from_slice(&hard);
        let rg = self.rg(u);
        self.push(
            Op::Spike {
                u,
                theta,
                surrogate,
                hard,
            },
            out,
            rg,
        )
    }

    /// `v = u·(1 - s) + u_reset·s`
    pub fn hard_reset(&mut self, u: Var, s: Var, u_reset: f64) -> Var {
        let out = self.zip_with(u, s, |u, s| u * (1.0 - s) + u_reset * s);
        let rg = self.rg(u) || self.rg(s);
        self.push(Op::HardReset { u, s, u_reset }, out, rg)
    }

    /// `v = u - θ·s`
    pub fn soft_reset(&mut self, u: Var, s: Var, theta: f64) -> Var {
        let out = self.zip_with(u, s, |u, s| u - theta * s);
        let rg = self.rg(u) || self.rg(s);
        self.push(Op::SoftReset { u, s, theta }, out, rg)
    }

    /// Window aggregation of potentials `us` into a `(slots, ...)` tensor
    /// following `plan`. With `sat`, each window sum is multiplied by the
    /// spike that closed it, which is 1 in the forward pass but routes
    /// gradient through the threshold.
    pub fn aggregate(
        &mut self,
        us: &[Var],
        ss: &[Var],
        plan: Rc<AggregationPlan>,
        sat: bool,
    ) -> Var {
        assert_eq!(us.len(), plan.steps);
        assert_eq!(ss.len(), plan.steps);
        let unit_shape = self.value(us[0]).shape().to_vec();
        assert_eq!(unit_shape.iter().product::<usize>(), plan.neurons);
        let uv: Vec<&[f64]> = us.iter().map(|&u| self.value(u).data()).collect();
        let sv: Vec<&[f64]> = ss.iter().map(|&s| self.value(s).data()).collect();
        let out = aggregate_values(&plan, &uv, &sv, sat);
        let mut shape = vec![plan.slots];
        shape.extend_from_slice(&unit_shape);
        let rg = us.iter().any(|&u| self.rg(u)) || (sat && ss.iter().any(|&s| self.rg(s)));
        self.push(
            Op::Aggregate {
                us: us.to_vec(),
                ss: ss.to_vec(),
                plan,
                sat,
            },
            Tensor::from_vec(&shape, out),
            rg,
        )
    }

    /// Entry `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        let inner: Vec<usize> = xv.shape()[1..].to_vec();
        let n: usize = inner.iter().product();
        let out = Tensor::from_vec(&inner, xv.data()[index * n..(index + 1) * n].to_vec());
        let rg = self.rg(x);
        self.push(Op::Select { x, index }, out, rg)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x));
        }
        acc.scale(1.0 / xs.len() as f64);
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Op::Mean(xs.to_vec()), acc, rg)
    }

    /// Average pooling of a `(C, H, W)` tensor onto a `grid × grid` map; cell
    /// `i` covers rows `⌊iH/g⌋ .. ⌈(i+1)H/g⌉` (and likewise for columns).
    pub fn adaptive_pool(&mut self, x: Var, grid: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c * grid * grid];
        for ch in 0..c {
            for gy in 0..grid {
                let (y0, y1) = pool_range(gy, h, grid);
                for gx in 0..grid {
                    let (x0, x1) = pool_range(gx, w, grid);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += xv.data()[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * grid + gy) * grid + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Op::AdaptivePool { x, grid },
            Tensor::from_vec(&[c, grid, grid], out),
            rg,
        )
    }

    /// `y = W·flatten(x) + b` with `W` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).data();
        let wv = self.value(w);
        let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(n_in, xv.len(), "linear input size");
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &wv.data()[o * n_in..(o + 1) * n_in];
                row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() + bv[o]
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Linear { x, w, b }, Tensor::from_vec(&[n_out], out), rg)
    }

    pub fn detection_loss(&mut self, logits: Var, target: LossTarget, cfg: LossConfig) -> Var {
        let loss = detection_loss_from_logits(self.value(logits).data(), &target, &cfg);
        let rg = self.rg(logits);
        self.push(
            Op::DetectionLoss {
                logits,
                target,
                cfg,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// `Σ_i weights[i]·x[i]`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), weights.len());
        let s = xv.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s), rg)
    }

    /// Flattens and joins tensors into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let n = data.len();
        self.push(Op::Concat(xs.to_vec()), Tensor::from_vec(&[n], data), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(GradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(GradError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params: Vec<(usize, Var)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, Var(i))),
                _ => None,
            })
            .collect();
        for &(p, v) in &params {
            if let Some(g) = &grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(GradError::NonFiniteGradient(format!("#{p}")));
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, geom } => {
                let (dx, dw) = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, |a| add_into(a, &dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, |a| add_into(a, &dw));
                }
            }
            Op::ChannelBias { x, b } => {
                self.accumulate(grads, *x, |a| add_into(a, g));
                let channels = self.value(*b).len();
                let plane = g.len() / channels;
                self.accumulate(grads, *b, |a| {
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        a[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * factor;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Spike {
                u,
                theta,
                surrogate,
                ..
            } => {
                if self.mode == SpikeMode::Exact {
                    return;
                }
                let uv = self.value(*u).data();
                self.accumulate(grads, *u, |acc| {
                    for i in 0..g.len() {
                        if g[i] != 0.0 {
                            acc[i] += g[i] * surrogate.eval(uv[i] - theta);
                        }
                    }
                });
            }
            Op::HardReset { u, s, u_reset } => {
                let (uv, sv) = (self.value(*u).data(), self.value(*s).data());
                self.accumulate(grads, *u, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * (1.0 - sv[i]);
                    }
                });
                self.accumulate(grads, *s, |acc| {
                    for i in 0..g.len() {
                        acc[i] += g[i] * (u_reset - uv[i]);
                    }
                });
            }
            Op::SoftReset { u, s, theta } => {
                self.accumulate(grads, *u, |acc| add_into(acc, g));
                self.accumulate(grads, *s, |acc| {
                    for i in 0..g.len() {
                        acc[i] -= g[i] * theta;
                    }
                });
            }
            Op::Aggregate { us, ss, plan, sat } => {
                let n = plan.neurons;
                for term in &plan.terms {
                    let i = term.neuron as usize;
                    let go = g[term.slot as usize * n + i];
                    if go == 0.0 {
                        continue;
                    }
                    let factor = match (*sat, term.spike_step) {
                        (true, Some(k)) => {
                            let s_var = ss[k as usize];
                            if self.rg(s_var) {
                                let mut sum = 0.0;
                                for t in term.first..=term.last {
                                    sum += self.value(us[t as usize]).data()[i];
                                }
                                self.accumulate(grads, s_var, |acc| acc[i] += go * sum);
                            }
                            self.value(s_var).data()[i]
                        }
                        _ => 1.0,
                    };
                    for t in term.first..=term.last {
                        self.accumulate(grads, us[t as usize], |acc| acc[i] += go * factor);
                    }
                }
            }
            Op::Select { x, index } => {
                let n = g.len();
                self.accumulate(grads, *x, |acc| add_into(&mut acc[index * n..(index + 1) * n], g));
            }
            Op::Mean(xs) => {
                let k = 1.0 / xs.len() as f64;
                for &x in xs {
                    self.accumulate(grads, x, |acc| {
                        for i in 0..g.len() {
                            acc[i] += g[i] * k;
                        }
                    });
                }
            }
            Op::AdaptivePool { x, grid } => {
                let shape = self.value(*x).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let grid = *grid;
                self.accumulate(grads, *x, |acc| {
                    for ch in 0..c {
                        for gy in 0..grid {
                            let (y0, y1) = pool_range(gy, h, grid);
                            for gx in 0..grid {
                                let (x0, x1) = pool_range(gx, w, grid);
                                let share = g[(ch * grid + gy) * grid + gx]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        acc[(ch * h + y) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n_in = xv.len();
                self.accumulate(grads, *x, |acc| {
                    for (o, go) in g.iter().enumerate() {
                        for j in 0..n_in {
                            acc[j] += go * wv[o * n_in + j];
                        }
                    }
                });
                self.accumulate(grads, *w, |acc| {
                    for (o, go) in g.iter().enumerate() {
                        for j in 0..n_in {
                            acc[o * n_in + j] += go * xv[j];
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::DetectionLoss {
                logits,
                target,
                cfg,
            } => {
                let z = self.value(*logits).data();
                let go = g[0];
                self.accumulate(grads, *logits, |acc| {
                    if target.present {
                        acc[0] += go * (sigmoid(z[0]) - 1.0);
                        for i in 0..4 {
                            let p = sigmoid(z[i + 1]);
                            let d = p - target.boxn[i];
                            acc[i + 1] += go
                                * cfg.box_weight
                                * smooth_l1_grad(d, cfg.smooth_l1_beta)
                                * p
                                * (1.0 - p);
                        }
                    } else {
                        acc[0] += go * sigmoid(z[0]);
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.accumulate(grads, x, |acc| add_into(acc, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::WeightedSum { x, weights } => {
                let go = g[0];
                self.accumulate(grads, *x, |acc| {
                    for (a, w) in acc.iter_mut().zip(weights) {
                        *a += go * w;
                    }
                });
            }
        }
    }
}

/// Forward value of a window aggregation; `us[t]` and `ss[t]` are the
/// potentials and spikes of step `t`, one entry per neuron.
pub fn aggregate_values(plan: &AggregationPlan, us: &[&[f64]], ss: &[&[f64]], sat: bool) -> Vec<f64> {
    let n = plan.neurons;
    let mut out = vec![0.0; plan.slots * n];
    for term in &plan.terms {
        let i = term.neuron as usize;
        let mut sum = 0.0;
        for t in term.first..=term.last {
            sum += us[t as usize][i];
        }
        let contribution = match (sat, term.spike_step) {
            (true, Some(k)) => ss[k as usize][i] * sum,
            _ => sum,
        };
        out[term.slot as usize * n + i] += contribution;
    }
    out
}

#[inline]
fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[inline]
pub(crate) fn pool_range(i: usize, len: usize, grid: usize) -> (usize, usize) {
    let lo = i * len / grid;
    let hi = ((i + 1) * len).div_ceil(grid);
    (lo, hi.max(lo + 1).min(len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain() {
        let mut tape = Tape::new(SpikeMode::Surrogate);
        let x = tape.param(0, Tensor::scalar(3.0));
        let y = tape.weighted_sum(x, vec![1.0]);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(0).unwrap(), &[1.0]);
    }

    #[test]
    fn disconnected_and_non_scalar() {
        let mut tape = Tape::new(SpikeMode::Surrogate);
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.weighted_sum(x, vec![2.0]);
        assert_eq!(tape.backward(y).err(), Some(GradError::DisconnectedLoss));
        let p = tape.param(0, Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(GradError::NonScalarLoss(_))));
    }

    /// Single LIF neuron `u_t = γ·u_{t-1} + g·I` without spikes; `d(Σu)/dg`
    /// against `Σ_t I·(1 - γ^t)/(1 - γ)`.
    #[test]
    fn lif_gain_gradient_closed_form() {
        let (decay, gain, input) = (0.6, 0.3, 1.2);
        let spec = SurrogateSpec::default();
        let mut tape = Tape::new(SpikeMode::Surrogate);
        let g = tape.param(0, Tensor::scalar(gain));
        let i = tape.input(Tensor::scalar(input));
        let drive = tape.mul(g, i);
        let mut v = tape.input(Tensor::scalar(0.0));
        let mut us = Vec::new();
        for _ in 0..3 {
            let leak = tape.scale(v, decay);
            let u = tape.add(leak, drive);
            let s = tape.spike(u, 10.0, spec);
            v = tape.hard_reset(u, s, 0.0);
            us.push(u);
        }
        let total = {
            let a = tape.add(us[0], us[1]);
            tape.add(a, us[2])
        };
        let loss = tape.weighted_sum(total, vec![1.0]);
        let grads = tape.backward(loss).unwrap();
        let expected: f64 = (1..=3)
            .map(|t| input * (1.0 - decay.powi(t)) / (1.0 - decay))
            .sum();
        assert!((grads.param(0).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn spike_modes() {
        let spec = SurrogateSpec::default();
        for (mode, value, grad) in [
            (SpikeMode::Surrogate, 1.0, 0.75),
            (SpikeMode::Exact, 1.0, 0.0),
            (SpikeMode::Relaxed, 1.0 - 0.75 * 0.75 / 2.0, 0.75),
        ] {
            let mut tape = Tape::new(mode);
            let u = tape.param(0, Tensor::scalar(1.25));
            let s = tape.spike(u, 1.0, spec);
            assert_eq!(tape.value(s).data()[0], value);
            assert_eq!(tape.spike_decisions(s), &[true]);
            let l = tape.weighted_sum(s, vec![1.0]);
            let g = tape.backward(l).unwrap();
            assert_eq!(g.param(0).map_or(0.0, |g| g[0]), grad);
        }
    }

    #[test]
    fn concat_routes_gradients() {
        let mut tape = Tape::new(SpikeMode::Surrogate);
        let a = tape.param(0, Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = tape.param(1, Tensor::scalar(3.0));
        tape.set_scope("x");
        let c = tape.concat(&[a, b]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let l = tape.weighted_sum(c, vec![4.0, 5.0, 6.0]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param(0).unwrap(), &[4.0, 5.0]);
        assert_eq!(g.param(1).unwrap(), &[6.0]);
        assert!(tape.synaptic_ops().is_empty());
    }

    #[test]
    fn pooling_ranges_cover() {
        for len in 1..12 {
            for grid in 1..6 {
                let mut covered = vec![false; len];
                for i in 0..grid {
                    let (lo, hi) = pool_range(i, len, grid);
                    assert!(lo < hi && hi <= len);
                    covered[lo..hi].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn loss_values() {
        let cfg = LossConfig::default();
        let target = LossTarget {
            present: true,
            boxn: [0.5; 4],
        };
        // zero box error, objectness p = σ(z): loss = -ln p
        let z0 = 0.3;
        let l = detection_loss_from_logits(&[z0, 0.0, 0.0, 0.0, 0.0], &target, &cfg);
        assert!((l + sigmoid(z0).ln()).abs() < 1e-14);
    }
}
