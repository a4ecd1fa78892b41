//! Frontend (learned sampler or fixed-window event counts) followed by a small
//! convolutional detection head, recorded end to end on one tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::ToyAnnotation;
use super::HarnessError;
use crate::event::{EventStream, SensorSize};
use crate::grad::{
    sigmoid, GradientSet, LossConfig, LossTarget, ParamSet, SpikeMode, Tape, Var,
};
use crate::neuron::SurrogateSpec;
use crate::repr::{early_aggregate, event_count, fixed_window_sample, TimeWindow};
use crate::sampler::{record_embedding, record_sampler, SamplerConfig, SamplerWeights, SAMPLER_PARAM_NAMES};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    /// Early aggregation into `T_m` count frames, then the spiking sampler.
    #[default]
    Sampler,
    /// `K` count frames over equal fixed windows.
    EventCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub channels1: usize,
    pub channels2: usize,
    /// Soft-reset LIF activations carried across slots; ReLU otherwise.
    pub spiking: bool,
    pub decay: f64,
    pub threshold: f64,
    /// Side of the average-pooling grid before the linear layer.
    pub pool_grid: usize,
    pub surrogate: SurrogateSpec,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels1: 8,
            channels2: 16,
            spiking: true,
            decay: 0.5,
            threshold: 1.0,
            pool_grid: 4,
            surrogate: SurrogateSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: Frontend,
    pub sampler: SamplerConfig,
    pub head: HeadConfig,
    /// Global window `T` in microseconds, ending at the annotation time.
    pub window_us: u64,
    /// Early-aggregation steps `T_m`.
    pub steps: usize,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: Frontend::Sampler,
            sampler: SamplerConfig::default(),
            head: HeadConfig::default(),
            window_us: 24_000,
            steps: 8,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn slots(&self) -> usize {
        self.sampler.slots
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        self.sampler.validate()?;
        if self.steps == 0 || !self.window_us.is_multiple_of(self.steps as u64) {
            return bad(format!("{} steps must divide the window {} us", self.steps, self.window_us));
        }
        if self.frontend == Frontend::EventCount && !self.window_us.is_multiple_of(self.slots() as u64) {
            return bad(format!("{} slots must divide the window {} us", self.slots(), self.window_us));
        }
        let h = &self.head;
        if h.channels1 == 0 || h.channels2 == 0 || h.pool_grid == 0 {
            return bad("head widths and pooling grid must be positive".into());
        }
        if !(0.0..1.0).contains(&h.decay) || !(h.threshold > 0.0) {
            return bad("head decay must lie in [0, 1) and its threshold be positive".into());
        }
        h.surrogate.validate().map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if !(self.loss.box_weight >= 0.0 && self.loss.smooth_l1_beta > 0.0) {
            return bad("loss weights must be non-negative and beta positive".into());
        }
        Ok(())
    }

    fn conv1(&self, sensor: SensorSize) -> ConvGeometry {
        ConvGeometry {
            in_channels: 2,
            out_channels: self.head.channels1,
            kernel: 3,
            stride: 2,
            padding: 1,
            in_h: sensor.height as usize,
            in_w: sensor.width as usize,
        }
    }

    fn conv2(&self, sensor: SensorSize) -> ConvGeometry {
        let c1 = self.conv1(sensor);
        ConvGeometry {
            in_channels: self.head.channels1,
            out_channels: self.head.channels2,
            kernel: 3,
            stride: 2,
            padding: 1,
            in_h: c1.out_h(),
            in_w: c1.out_w(),
        }
    }

    fn fc_inputs(&self) -> usize {
        self.slots() * self.head.channels2 * self.head.pool_grid * self.head.pool_grid
    }
}

/// Precomputed frontend input of one stream.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    /// `T_m` early-aggregated count frames `(2, H, W)`, oldest first.
    Frames(Vec<Tensor>),
    /// `K` fixed-window count frames, oldest first.
    Slots(Vec<Tensor>),
}

impl ModelInput {
    pub fn sensor_shape(&self) -> &[usize] {
        match self {
            ModelInput::Frames(f) | ModelInput::Slots(f) => f[0].shape(),
        }
    }
}

/// Builds the frontend input for the window `[t - T, t]` (the event-count
/// frontend uses the half-open `[t - T, t)`).
pub fn prepare_input(cfg: &ModelConfig, stream: &EventStream, t: u64) -> Result<ModelInput, HarnessError> {
    match cfg.frontend {
        Frontend::Sampler => {
            let seq = early_aggregate(stream, t, cfg.window_us, cfg.steps)?;
            Ok(ModelInput::Frames(seq.frames.iter().map(|f| f.to_tensor()).collect()))
        }
        Frontend::EventCount => {
            let k = cfg.slots();
            let dt = cfg.window_us / k as u64;
            let slices = fixed_window_sample(stream, t, cfg.window_us, dt)?;
            let events = stream.events();
            Ok(ModelInput::Slots(
                slices
                    .iter()
                    .enumerate()
                    .rev()
                    .map(|(j, idx)| {
                        let end = t - j as u64 * dt;
                        event_count(idx.iter().map(|&i| &events[i]), stream.sensor(), TimeWindow::new(end - dt, end))
                            .to_tensor()
                    })
                    .collect(),
            ))
        }
    }
}

/// Objectness probability and centre-form box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub objectness: f64,
    pub boxp: [f64; 4],
}

pub fn prediction_from_logits(z: &[f64], sensor: SensorSize) -> Prediction {
    let (w, h) = (sensor.width as f64, sensor.height as f64);
    Prediction {
        objectness: sigmoid(z[0]),
        boxp: [w * sigmoid(z[1]), h * sigmoid(z[2]), w * sigmoid(z[3]), h * sigmoid(z[4])],
    }
}

pub fn loss_target(a: &ToyAnnotation, sensor: SensorSize) -> LossTarget {
    let (w, h) = (sensor.width as f64, sensor.height as f64);
    LossTarget {
        present: true,
        boxn: [a.cx / w, a.cy / h, a.w / w, a.h / h],
    }
}

pub const HEAD_PARAM_NAMES: [&str; 6] = [
    "head.conv1.w",
    "head.conv1.b",
    "head.conv2.w",
    "head.conv2.b",
    "head.fc.w",
    "head.fc.b",
];

/// Uniform `±sqrt(6 / fan_in)` kernels, zero biases.
pub fn init_head(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<(String, Tensor)> {
    let h = &cfg.head;
    let mut uniform = |shape: &[usize], fan_in: usize| {
        let a = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-a..a)).collect())
    };
    let shapes = [
        uniform(&[h.channels1, 2, 3, 3], 18),
        Tensor::zeros(&[h.channels1]),
        uniform(&[h.channels2, h.channels1, 3, 3], 9 * h.channels1),
        Tensor::zeros(&[h.channels2]),
        uniform(&[5, cfg.fc_inputs()], cfg.fc_inputs()),
        Tensor::zeros(&[5]),
    ];
    HEAD_PARAM_NAMES.iter().map(|n| n.to_string()).zip(shapes).collect()
}

/// Fresh parameters: sampler tensors (sampler frontend only), then the head.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    if cfg.frontend == Frontend::Sampler {
        let w = SamplerWeights::init(cfg.sampler.kernel, rng);
        for (name, t) in SAMPLER_PARAM_NAMES.iter().zip(w.tensors()) {
            params.push(*name, t.clone());
        }
    }
    for (name, t) in init_head(cfg, rng) {
        params.push(name, t);
    }
    params
}

/// Sampler weights of a sampler-frontend parameter set.
pub fn sampler_weights(params: &ParamSet) -> Option<SamplerWeights> {
    let tensors: Option<Vec<Tensor>> = SAMPLER_PARAM_NAMES.iter().map(|n| params.by_name(n).cloned()).collect();
    SamplerWeights::from_tensors(tensors?).ok()
}

/// Names and shapes [`init_params`] produces.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = &cfg.head;
    let k = cfg.sampler.kernel;
    let mut out = Vec::new();
    if cfg.frontend == Frontend::Sampler {
        for name in SAMPLER_PARAM_NAMES {
            let shape = if name.contains(".b_") { vec![2] } else { vec![2, 2, k, k] };
            out.push((name.to_string(), shape));
        }
    }
    let shapes = [
        vec![h.channels1, 2, 3, 3],
        vec![h.channels1],
        vec![h.channels2, h.channels1, 3, 3],
        vec![h.channels2],
        vec![5, cfg.fc_inputs()],
        vec![5],
    ];
    out.extend(HEAD_PARAM_NAMES.iter().map(|n| n.to_string()).zip(shapes));
    out
}

fn check_params(cfg: &ModelConfig, params: &ParamSet) -> Result<(), HarnessError> {
    let layout = param_layout(cfg);
    let matches = layout.len() == params.len()
        && layout
            .iter()
            .zip(params.names().iter().zip(params.tensors()))
            .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
    if !matches {
        return Err(HarnessError::InvalidConfig(
            "parameters do not match the model configuration".into(),
        ));
    }
    Ok(())
}

/// Records the frontend's `K` slot tensors.
fn record_frontend(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &[Var],
    input: &ModelInput,
) -> Result<(Vec<Var>, usize), HarnessError> {
    match (cfg.frontend, input) {
        (Frontend::Sampler, ModelInput::Frames(frames)) => {
            tape.set_scope("sampler");
            let p: [Var; 6] = vars[..6].try_into().expect("six sampler parameters");
            let sv = record_sampler(tape, frames, &p, &cfg.sampler)?;
            let (emb, _) = record_embedding(tape, &sv, &cfg.sampler)?;
            let slots = (0..cfg.slots()).map(|k| tape.select(emb, k)).collect();
            Ok((slots, 6))
        }
        (Frontend::EventCount, ModelInput::Slots(slots)) => {
            if slots.len() != cfg.slots() {
                return Err(HarnessError::InvalidConfig(format!(
                    "{} input slots for a {}-slot model",
                    slots.len(),
                    cfg.slots()
                )));
            }
            Ok((slots.iter().map(|s| tape.input(s.clone())).collect(), 0))
        }
        _ => Err(HarnessError::InvalidConfig("input does not match the frontend".into())),
    }
}

/// Records frontend and head; returns the five output logits
/// `[objectness, cx, cy, w, h]`.
pub fn record_logits(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &[Var],
    input: &ModelInput,
) -> Result<Var, HarnessError> {
    let shape = input.sensor_shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(HarnessError::InvalidConfig(format!("input frames must be (2, H, W), got {shape:?}")));
    }
    let sensor = SensorSize::new(shape[2] as u16, shape[1] as u16);
    let (slots, offset) = record_frontend(tape, cfg, vars, input)?;
    let [w1, b1, w2, b2, wf, bf]: [Var; 6] = vars[offset..offset + 6].try_into().expect("six head parameters");
    let h = &cfg.head;
    let (g1, g2) = (cfg.conv1(sensor), cfg.conv2(sensor));
    let mut state: [Option<Var>; 2] = [None, None];
    let mut pooled = Vec::with_capacity(slots.len());
    for x in slots {
        let mut act = x;
        for (layer, (w, b, g, scope)) in [(w1, b1, g1, "head.conv1"), (w2, b2, g2, "head.conv2")].into_iter().enumerate() {
            tape.set_scope(scope);
            let a = tape.conv2d(act, w, g);
            let a = tape.channel_bias(a, b);
            act = if h.spiking {
                let u = match state[layer] {
                    Some(v) => {
                        let leak = tape.scale(v, h.decay);
                        tape.add(leak, a)
                    }
                    None => a,
                };
                let s = tape.spike(u, h.threshold, h.surrogate);
                state[layer] = Some(tape.soft_reset(u, s, h.threshold));
                s
            } else {
                tape.relu(a)
            };
        }
        pooled.push(tape.adaptive_pool(act, h.pool_grid));
    }
    tape.set_scope("head.fc");
    let features = tape.concat(&pooled);
    let logits = tape.linear(features, wf, bf);
    tape.set_scope("");
    Ok(logits)
}

/// Forward pass without gradients.
pub fn predict(cfg: &ModelConfig, params: &ParamSet, input: &ModelInput) -> Result<Prediction, HarnessError> {
    let mut tape = Tape::new(SpikeMode::Surrogate);
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.input(t.clone())).collect();
    let logits = record_logits(&mut tape, cfg, &vars, input)?;
    let shape = input.sensor_shape();
    Ok(prediction_from_logits(
        tape.value(logits).data(),
        SensorSize::new(shape[2] as u16, shape[1] as u16),
    ))
}

/// Loss and parameter gradients for one stream.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    params: &ParamSet,
    input: &ModelInput,
    target: LossTarget,
) -> Result<GradientSet, HarnessError> {
    let mut tape = Tape::new(SpikeMode::Surrogate);
    let vars = params.register(&mut tape);
    let logits = record_logits(&mut tape, cfg, &vars, input)?;
    let loss = tape.detection_loss(logits, target, cfg.loss);
    let grads = tape.backward(loss)?;
    Ok(GradientSet::from_tape(&grads, params, tape.value(loss).data()[0]))
}

/// Model configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self, HarnessError> {
        cfg.validate()?;
        Ok(Self {
            params: init_params(&cfg, rng),
            cfg,
        })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self, HarnessError> {
        cfg.validate()?;
        check_params(&cfg, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn prepare(&self, stream: &EventStream, t: u64) -> Result<ModelInput, HarnessError> {
        prepare_input(&self.cfg, stream, t)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Prediction, HarnessError> {
        predict(&self.cfg, &self.params, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_predicts_centre() {
        let cfg = ModelConfig {
            frontend: Frontend::EventCount,
            ..Default::default()
        };
        let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for t in params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let input = ModelInput::Slots(vec![Tensor::zeros(&[2, 32, 32]); 3]);
        let p = predict(&cfg, &params, &input).unwrap();
        assert_eq!(p.objectness, 0.5);
        assert_eq!(p.boxp, [16.0; 4]);
    }

    #[test]
    fn spiking_and_dense_heads_differ() {
        let mut cfg = ModelConfig::default();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let frames: Vec<Tensor> = (0..8)
            .map(|j| {
                Tensor::from_vec(&[2, 32, 32], (0..2048).map(|i| ((i * 7 + j * 3) % 11 == 0) as u8 as f64 * 2.0).collect())
            })
            .collect();
        let input = ModelInput::Frames(frames);
        let a = predict(&cfg, &params, &input).unwrap();
        cfg.head.spiking = false;
        let b = predict(&cfg, &params, &input).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let input = ModelInput::Slots(vec![Tensor::zeros(&[2, 32, 32]); 3]);
        assert!(predict(&cfg, &params, &input).is_err());
        let wrong = ModelConfig {
            frontend: Frontend::EventCount,
            ..Default::default()
        };
        assert!(Model::from_params(wrong, params.clone()).is_err());
        assert!(Model::from_params(cfg, params).is_ok());
    }
}
