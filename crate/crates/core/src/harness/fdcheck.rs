//! Finite-difference check of the full detector on one synthetic stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{init_params, loss_target, prepare_input, record_logits, ModelConfig};
use super::synth::{gen_synthetic, SceneConfig};
use super::HarnessError;
use crate::grad::{finite_diff_check, FdConfig, FdReport, GradError, Tape, Var};

/// Generates the scene and initial parameters from `seed`, then compares the
/// detection-loss gradient with central differences on `fd.trials`
/// coordinates.
pub fn detector_gradcheck(
    cfg: &ModelConfig,
    scene: &SceneConfig,
    seed: u64,
    fd: &FdConfig,
) -> Result<FdReport, HarnessError> {
    cfg.validate()?;
    let (stream, ann) = gen_synthetic(&SceneConfig { seed, ..*scene })?;
    let input = prepare_input(cfg, &stream, ann.t)?;
    let target = loss_target(&ann, stream.sensor());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(cfg, &mut rng);
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var, GradError> {
        let z = record_logits(tape, cfg, vars, &input).map_err(|e| GradError::ShapeMismatch(e.to_string()))?;
        Ok(tape.detection_loss(z, target, cfg.loss))
    };
    Ok(finite_diff_check(&objective, &params, fd, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_detector_passes() {
        let scene = SceneConfig {
            width: 16,
            height: 16,
            min_size: 4.0,
            max_size: 6.0,
            ..Default::default()
        };
        let fd = FdConfig {
            trials: 16,
            ..Default::default()
        };
        let r = detector_gradcheck(&ModelConfig::default(), &scene, 1, &fd).unwrap();
        assert!(r.tested > 0);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
