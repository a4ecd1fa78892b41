use std::rc::Rc;

use super::windows::{adaptive_plan, fixed_plan};
use super::{SamplerConfig, SamplerError, SamplerMode, SamplerWeights};
use crate::event::SensorSize;
use crate::grad::{AggregationPlan, SpikeMode, Tape, Var};
use crate::neuron::ResetMode;
use crate::repr::{FrameSequence, TimeWindow};
use crate::tensor::{ConvGeometry, Tensor};

/// Tape handles of an unrolled sampler, one entry per step.
#[derive(Debug, Clone)]
pub struct SamplerVars {
    pub u: Vec<Var>,
    pub v: Vec<Var>,
    pub s: Vec<Var>,
    /// Decay gates; empty for the non-recurrent variant.
    pub gamma: Vec<Var>,
}

/// Per-step sampler state, each entry shaped `(2, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub mode: SamplerMode,
    pub sensor: SensorSize,
    pub window: TimeWindow,
    pub step_us: u64,
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub gamma: Vec<Tensor>,
}

impl SamplerTrace {
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn neurons(&self) -> usize {
        self.sensor.bins()
    }

    /// Spike flags of step `t` (0-based).
    pub fn spikes(&self, t: usize) -> Vec<bool> {
        self.s[t].data().iter().map(|&v| v != 0.0).collect()
    }

    pub fn spike_count(&self) -> usize {
        self.s.iter().map(|s| s.data().iter().filter(|&&v| v != 0.0).count()).sum()
    }
}

fn geometry(kernel: usize, h: usize, w: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: 2,
        out_channels: 2,
        kernel,
        stride: 1,
        padding: kernel / 2,
        in_h: h,
        in_w: w,
    }
}

/// Records the unrolled sampler on `tape`. `params` are the six sampler
/// tensors in [`super::SAMPLER_PARAM_NAMES`] order; `frames` are `(2, H, W)`.
pub fn record_sampler(
    tape: &mut Tape,
    frames: &[Tensor],
    params: &[Var; 6],
    cfg: &SamplerConfig,
) -> Result<SamplerVars, SamplerError> {
    let Some(first) = frames.first() else {
        return Err(SamplerError::ShapeMismatch("at least one frame is required".into()));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(SamplerError::ShapeMismatch(format!(
            "frames must be (2, H, W), found {shape:?}"
        )));
    }
    if let Some(f) = frames.iter().find(|f| f.shape() != shape.as_slice()) {
        return Err(SamplerError::ShapeMismatch(format!(
            "frame shape {:?} differs from {shape:?}",
            f.shape()
        )));
    }
    let kernel = tape.value(params[0]).shape()[2];
    let geom = geometry(kernel, shape[1], shape[2]);
    let [w_in_ff, w_in_rec, b_in, w_gate_ff, w_gate_rec, b_gate] = *params;

    let mut vars = SamplerVars {
        u: Vec::with_capacity(frames.len()),
        v: Vec::with_capacity(frames.len()),
        s: Vec::with_capacity(frames.len()),
        gamma: Vec::new(),
    };
    let mut v_prev = tape.input(Tensor::zeros(&shape));
    let mut s_prev: Option<Var> = None;
    for frame in frames {
        let f = tape.input(frame.clone());
        let u = match cfg.mode {
            SamplerMode::Snn => {
                let drive = tape.conv2d(f, w_in_ff, geom);
                let current = tape.channel_bias(drive, b_in);
                let leak = tape.scale(v_prev, cfg.snn_decay);
                tape.add(leak, current)
            }
            SamplerMode::Rsnn | SamplerMode::Arsnn => {
                let mut drive = tape.conv2d(f, w_in_ff, geom);
                let mut gate = tape.conv2d(f, w_gate_ff, geom);
                if let Some(s) = s_prev {
                    let rec = tape.conv2d(s, w_in_rec, geom);
                    drive = tape.add(drive, rec);
                    let rec = tape.conv2d(s, w_gate_rec, geom);
                    gate = tape.add(gate, rec);
                }
                let current = tape.channel_bias(drive, b_in);
                let gate = tape.channel_bias(gate, b_gate);
                let gamma = tape.sigmoid(gate);
                vars.gamma.push(gamma);
                let leak = tape.mul(gamma, v_prev);
                tape.add(leak, current)
            }
        };
        let s = tape.spike(u, cfg.threshold, cfg.surrogate);
        let v = match cfg.reset {
            ResetMode::Hard => tape.hard_reset(u, s, cfg.u_reset),
            ResetMode::Soft => tape.soft_reset(u, s, cfg.threshold),
        };
        vars.u.push(u);
        vars.s.push(s);
        vars.v.push(v);
        v_prev = v;
        s_prev = Some(s);
    }
    Ok(vars)
}

/// Records the `(K, 2, H, W)` embedding of an unrolled sampler. The adaptive
/// variant takes its windows from the recorded spike decisions; the others
/// split the steps into `K` fixed chunks.
pub fn record_embedding(
    tape: &mut Tape,
    vars: &SamplerVars,
    cfg: &SamplerConfig,
) -> Result<(Var, Rc<AggregationPlan>), SamplerError> {
    if cfg.slots == 0 {
        return Err(SamplerError::InvalidK(0));
    }
    let steps = vars.u.len();
    let neurons = tape.value(vars.u[0]).len();
    let plan = if cfg.mode.is_adaptive() {
        let spikes: Vec<&[bool]> = vars.s.iter().map(|&s| tape.spike_decisions(s)).collect();
        adaptive_plan(&spikes, cfg.slots, cfg.rpd)
    } else {
        fixed_plan(steps, neurons, cfg.slots)
    };
    let plan = Rc::new(plan);
    let sat = cfg.sat && cfg.mode.is_adaptive();
    let emb = tape.aggregate(&vars.u, &vars.s, plan.clone(), sat);
    Ok((emb, plan))
}

/// Runs the sampler over `frames` and returns the full state trace.
pub fn sampler_forward(
    frames: &FrameSequence,
    weights: &SamplerWeights,
    cfg: &SamplerConfig,
) -> Result<SamplerTrace, SamplerError> {
    cfg.validate()?;
    weights.validate(cfg.kernel)?;
    if frames.frames.is_empty() {
        return Err(SamplerError::ShapeMismatch("at least one frame is required".into()));
    }
    let mut tape = Tape::new(SpikeMode::Surrogate);
    let params: Vec<Var> = weights.tensors().iter().map(|t| tape.input((*t).clone())).collect();
    let params: [Var; 6] = params.try_into().expect("six sampler tensors");
    let inputs: Vec<Tensor> = frames.frames.iter().map(|f| f.to_tensor()).collect();
    let vars = record_sampler(&mut tape, &inputs, &params, cfg)?;
    let collect = |vs: &[Var]| -> Vec<Tensor> { vs.iter().map(|&v| tape.value(v).clone()).collect() };
    let trace = SamplerTrace {
        mode: cfg.mode,
        sensor: frames.sensor(),
        window: frames.window,
        step_us: frames.step_us,
        u: collect(&vars.u),
        v: collect(&vars.v),
        s: collect(&vars.s),
        gamma: collect(&vars.gamma),
    };
    for step in 0..trace.steps() {
        let gamma_ok = trace.gamma.get(step).is_none_or(|g| g.is_finite());
        if !(trace.u[step].is_finite() && trace.v[step].is_finite() && gamma_ok) {
            return Err(SamplerError::NonFiniteActivation { step: step + 1 });
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, EventStream};
    use crate::grad::sigmoid;
    use crate::neuron::{lif_run, LifParams};
    use crate::repr::early_aggregate;

    fn frames_from(values: &[f64], sensor: SensorSize) -> FrameSequence {
        let n = sensor.bins();
        let steps = values.len() / n;
        let mut seq = early_aggregate(&EventStream::empty(sensor), 1000 * steps as u64, 1000 * steps as u64, steps).unwrap();
        for (j, f) in seq.frames.iter_mut().enumerate() {
            f.data.copy_from_slice(&values[j * n..(j + 1) * n]);
        }
        seq
    }

    #[test]
    fn zero_input_stays_silent() {
        let sensor = SensorSize::new(3, 2);
        let frames = frames_from(&vec![0.0; 4 * sensor.bins()], sensor);
        for mode in [SamplerMode::Snn, SamplerMode::Rsnn, SamplerMode::Arsnn] {
            let cfg = SamplerConfig {
                mode,
                ..Default::default()
            };
            let mut w = SamplerWeights::init(3, &mut rand::rng());
            w.b_in = Tensor::zeros(&[2]);
            let trace = sampler_forward(&frames, &w, &cfg).unwrap();
            assert!(trace.u.iter().all(|u| u.data().iter().all(|&x| x == 0.0)));
            assert_eq!(trace.spike_count(), 0);
        }
    }

    #[test]
    fn scalar_case_matches_lif_run() {
        let sensor = SensorSize::new(1, 1);
        let inputs = [0.4, 0.9, 0.0, 1.3, 0.2, 0.7];
        let values: Vec<f64> = inputs.iter().flat_map(|&x| [x, 0.5 * x]).collect();
        let frames = frames_from(&values, sensor);
        let mut w = SamplerWeights::zeros(1);
        w.w_in_ff = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        w.b_gate = Tensor::from_vec(&[2], vec![0.3, 0.3]);
        let cfg = SamplerConfig {
            mode: SamplerMode::Rsnn,
            kernel: 1,
            ..Default::default()
        };
        let trace = sampler_forward(&frames, &w, &cfg).unwrap();
        let params = LifParams {
            decay: sigmoid(0.3),
            gain: 1.0,
            ..Default::default()
        };
        for (c, scale) in [(0, 1.0), (1, 0.5)] {
            let scaled: Vec<f64> = inputs.iter().map(|x| x * scale).collect();
            let (spikes, us) = lif_run(&scaled, &params).unwrap();
            for t in 0..inputs.len() {
                assert!((trace.u[t].data()[c] - us[t]).abs() < 1e-12);
                assert_eq!(trace.s[t].data()[c] == 1.0, spikes[t]);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let sensor = SensorSize::new(2, 2);
        let frames = frames_from(&vec![1.0; 2 * sensor.bins()], sensor);
        let w = SamplerWeights::zeros(5);
        assert!(matches!(
            sampler_forward(&frames, &w, &SamplerConfig::default()),
            Err(SamplerError::ShapeMismatch(_))
        ));
        let cfg = SamplerConfig {
            kernel: 2,
            ..Default::default()
        };
        assert!(sampler_forward(&frames, &SamplerWeights::zeros(2), &cfg).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let sensor = SensorSize::new(1, 1);
        let stream = EventStream::new(vec![Event::new(10, 0, 0, 1)], sensor).unwrap();
        let frames = early_aggregate(&stream, 100, 100, 2).unwrap();
        let mut w = SamplerWeights::zeros(3);
        w.b_in = Tensor::from_vec(&[2], vec![f64::MAX, f64::MAX]);
        // step 1 spikes everywhere, step 2 adds MAX again through the recurrent tap
        w.w_in_rec.data_mut()[4] = f64::MAX;
        let cfg = SamplerConfig::default();
        assert!(matches!(
            sampler_forward(&frames, &w, &cfg),
            Err(SamplerError::NonFiniteActivation { .. })
        ));
    }
}
