//! Evaluates one trained model under several early-aggregation step counts.

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use super::synth::Sample;
use super::train::{evaluate_params, prepare_samples};
use super::HarnessError;
use crate::grad::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub steps: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
}

/// Accuracy of the same parameters with `T_m` replaced by each entry of
/// `steps`; the sampler itself does not depend on the step count.
pub fn tm_robustness_probe(
    cfg: &ModelConfig,
    params: &ParamSet,
    samples: &[Sample],
    steps: &[usize],
) -> Result<Vec<ProbeCell>, HarnessError> {
    steps
        .iter()
        .map(|&tm| {
            let probe_cfg = ModelConfig { steps: tm, ..*cfg };
            probe_cfg.validate()?;
            let data = prepare_samples(&probe_cfg, samples)?;
            let r = evaluate_params(&probe_cfg, params, &data, 0.5)?;
            Ok(ProbeCell {
                steps: tm,
                accuracy: r.report.accuracy,
                mean_iou: r.report.mean_iou,
            })
        })
        .collect()
}
