//! Mini-batch training with Adam and an EMA of the weights.
//!
//! Per-stream gradients may be computed in parallel but are always summed in
//! stream order, and all optimizer state is rounded to `f32` after every
//! update, so a run is bitwise reproducible and resumes exactly from a
//! checkpoint.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalReport};
use super::model::{loss_and_grad, loss_target, predict, prepare_input, ModelConfig, ModelInput};
use super::synth::{Sample, ToyAnnotation};
use super::HarnessError;
use crate::grad::{
    adam_step, AdamConfig, AdamState, Checkpoint, EmaState, GradientSet, LossTarget, ParamSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Shuffling seed; supplied by the run configuration, not serialized.
    #[serde(skip)]
    pub seed: u64,
    pub ema_momentum: f64,
    /// Updates over which the EMA momentum ramps up; 0 disables the ramp.
    pub ema_ramp: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            adam: AdamConfig::default(),
            seed: 0,
            ema_momentum: 0.9999,
            ema_ramp: 2000.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return bad("learning rate and Adam epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) || self.ema_ramp < 0.0 || self.clip_norm < 0.0 {
            return bad("EMA momentum must lie in [0, 1); ramp and clip must be non-negative");
        }
        Ok(())
    }
}

/// Frontend input and regression target of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input: ModelInput,
    pub target: LossTarget,
    pub annotation: ToyAnnotation,
}

/// Builds frontend inputs for every sample, ending each window at its
/// annotation time.
pub fn prepare_samples(cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<PreparedSample>, HarnessError> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                input: prepare_input(cfg, &s.stream, s.annotation.t)?,
                target: loss_target(&s.annotation, s.stream.sensor()),
                annotation: s.annotation,
            })
        })
        .collect()
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: String,
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
}

/// Parameters and optimizer state between updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: AdamState,
    pub ema: EmaState,
    pub epoch: u64,
    pub step: u64,
}

impl TrainState {
    pub fn new(mut params: ParamSet) -> Self {
        params.quantize_f32();
        Self {
            adam: AdamState::new(&params),
            ema: EmaState::new(&params),
            params,
            epoch: 0,
            step: 0,
        }
    }

    pub fn to_checkpoint(&self, meta: String) -> Checkpoint {
        Checkpoint {
            meta,
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            ema: Some(self.ema.clone()),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, HarnessError> {
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(&ckpt.params));
        let ema = ckpt.ema.unwrap_or_else(|| EmaState::new(&ckpt.params));
        if !adam.m.same_layout(&ckpt.params) || !ema.shadow.same_layout(&ckpt.params) {
            return Err(HarnessError::InvalidConfig("checkpoint state does not match its parameters".into()));
        }
        Ok(Self {
            params: ckpt.params,
            adam,
            ema,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }
}

/// Mean loss and gradient of a batch; summed in sample order.
pub fn batch_gradient(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &[&PreparedSample],
) -> Result<GradientSet, HarnessError> {
    let parts: Vec<GradientSet> = batch
        .par_iter()
        .map(|s| loss_and_grad(cfg, params, &s.input, s.target))
        .collect::<Result<_, _>>()?;
    let mut total = GradientSet::zeros(params);
    for g in &parts {
        total.add_assign(g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok(total)
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn quantize_state(state: &mut TrainState) {
    state.params.quantize_f32();
    state.adam.m.quantize_f32();
    state.adam.v.quantize_f32();
    state.ema.shadow.quantize_f32();
}

/// Runs one epoch; returns the mean batch loss and gradient norm.
pub fn train_epoch(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    state: &mut TrainState,
    data: &[PreparedSample],
) -> Result<(f64, f64), HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::InvalidConfig("training set is empty".into()));
    }
    let order = epoch_order(tcfg.seed, state.epoch, data.len());
    let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(tcfg.batch) {
        let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
        let mut g = batch_gradient(cfg, &state.params, &batch)?;
        let norm = g.norm();
        if tcfg.clip_norm > 0.0 && norm > tcfg.clip_norm {
            let loss = g.loss;
            g.scale(tcfg.clip_norm / norm);
            g.loss = loss;
        }
        adam_step(&mut state.params, &g, &tcfg.adam, &mut state.adam)?;
        state.ema.update(&state.params, tcfg.ema_momentum, tcfg.ema_ramp)?;
        quantize_state(state);
        state.step += 1;
        loss_sum += g.loss;
        norm_sum += norm;
        batches += 1;
    }
    state.epoch += 1;
    Ok((loss_sum / batches as f64, norm_sum / batches as f64))
}

/// Trains from `state.epoch` up to `tcfg.epochs`, reporting one `train`
/// record per epoch and, when `eval` is given, one `eval` record computed
/// with the EMA weights.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    state: &mut TrainState,
    data: &[PreparedSample],
    eval: Option<&[PreparedSample]>,
    mut on_record: impl FnMut(&MetricRecord, &TrainState),
) -> Result<(), HarnessError> {
    cfg.validate()?;
    tcfg.validate()?;
    while state.epoch < tcfg.epochs as u64 {
        let (loss, grad_norm) = train_epoch(cfg, tcfg, state, data)?;
        let rec = MetricRecord {
            kind: "train".into(),
            epoch: state.epoch,
            step: state.step,
            loss,
            grad_norm: Some(grad_norm),
            accuracy: None,
            mean_iou: None,
        };
        on_record(&rec, state);
        if let Some(test) = eval {
            let r = evaluate_params(cfg, &state.ema.shadow, test, 0.5)?;
            let rec = MetricRecord {
                kind: "eval".into(),
                epoch: state.epoch,
                step: state.step,
                loss: r.mean_loss,
                grad_norm: None,
                accuracy: Some(r.report.accuracy),
                mean_iou: Some(r.report.mean_iou),
            };
            on_record(&rec, state);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub report: EvalReport,
    pub mean_loss: f64,
}

/// Accuracy, mean IoU and mean loss of `params` on prepared samples.
pub fn evaluate_params(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &[PreparedSample],
    iou_threshold: f64,
) -> Result<ModelEval, HarnessError> {
    let results: Vec<_> = data
        .par_iter()
        .map(|s| {
            let p = predict(cfg, params, &s.input)?;
            Ok((p, s.annotation))
        })
        .collect::<Result<_, HarnessError>>()?;
    let report = evaluate(&results, iou_threshold)?;
    let losses: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let mut tape = crate::grad::Tape::new(crate::grad::SpikeMode::Surrogate);
            let vars: Vec<_> = params.tensors().iter().map(|t| tape.input(t.clone())).collect();
            let z = super::model::record_logits(&mut tape, cfg, &vars, &s.input)?;
            Ok(crate::grad::detection_loss_from_logits(tape.value(z).data(), &s.target, &cfg.loss))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(ModelEval { report, mean_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::{init_params, Frontend};
    use crate::harness::synth::{gen_dataset, SceneConfig};

    fn tiny() -> (ModelConfig, Vec<PreparedSample>) {
        let scene = SceneConfig {
            width: 12,
            height: 12,
            min_size: 3.0,
            max_size: 5.0,
            ..Default::default()
        };
        let cfg = ModelConfig {
            head: crate::harness::HeadConfig {
                channels1: 2,
                channels2: 3,
                pool_grid: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let data = gen_dataset(&scene, 6, 1).unwrap();
        (cfg, prepare_samples(&cfg, &data).unwrap())
    }

    #[test]
    fn runs_are_reproducible_and_resume_exactly() {
        let (cfg, data) = tiny();
        let tcfg = TrainConfig {
            epochs: 2,
            batch: 4,
            ..Default::default()
        };
        let init = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut a = TrainState::new(init.clone());
        let mut log_a = Vec::new();
        train(&cfg, &tcfg, &mut a, &data, Some(&data), |r, _| log_a.push(r.clone())).unwrap();
        let mut b = TrainState::new(init.clone());
        let mut log_b = Vec::new();
        train(&cfg, &tcfg, &mut b, &data, Some(&data), |r, _| log_b.push(r.clone())).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 4);

        // stop after one epoch, round-trip through a checkpoint, continue
        let mut c = TrainState::new(init);
        let one = TrainConfig { epochs: 1, ..tcfg };
        train(&cfg, &one, &mut c, &data, None, |_, _| {}).unwrap();
        let bytes = crate::grad::write_checkpoint(&c.to_checkpoint(String::new()));
        let mut c = TrainState::from_checkpoint(crate::grad::read_checkpoint(&bytes).unwrap()).unwrap();
        train(&cfg, &tcfg, &mut c, &data, None, |_, _| {}).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn event_count_frontend_trains() {
        let (mut cfg, _) = tiny();
        cfg.frontend = Frontend::EventCount;
        let scene = SceneConfig {
            width: 12,
            height: 12,
            min_size: 3.0,
            max_size: 5.0,
            ..Default::default()
        };
        let data = prepare_samples(&cfg, &gen_dataset(&scene, 4, 2).unwrap()).unwrap();
        let mut st = TrainState::new(init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)));
        let before = st.params.clone();
        train_epoch(&cfg, &TrainConfig::default(), &mut st, &data).unwrap();
        assert_ne!(before, st.params);
        assert_eq!(st.step, 1);
    }
}
