//! Input builders and check drivers shared by several test targets. Unlike the
//! oracles these call into the library.

use adasample::grad::{finite_diff_check, FdConfig, GradError, ParamSet, SpikeMode, Tape, Var};
use adasample::repr::FrameTensor;
use adasample::sampler::{record_embedding, record_sampler, SAMPLER_PARAM_NAMES};
use adasample::{FrameSequence, SamplerConfig, SamplerMode, SamplerWeights, SensorSize, Tensor, TimeWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wraps raw `(2, h, w)` count frames as an early-aggregated sequence with
/// 1 ms steps.
pub fn frame_sequence(frames: &[Vec<f64>], h: usize, w: usize) -> FrameSequence {
    let sensor = SensorSize::new(w as u16, h as u16);
    let step_us = 1000;
    FrameSequence {
        frames: frames
            .iter()
            .enumerate()
            .map(|(j, f)| FrameTensor {
                channels: 2,
                sensor,
                data: f.clone(),
                slice_index: j,
                window: TimeWindow::new(j as u64 * step_us, (j as u64 + 1) * step_us),
            })
            .collect(),
        step_us,
        window: TimeWindow::new(0, frames.len() as u64 * step_us),
    }
}

pub fn random_weights(rng: &mut impl Rng, k: usize) -> SamplerWeights {
    let mut w = SamplerWeights::zeros(k);
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    w
}

pub fn random_frames(rng: &mut impl Rng, steps: usize, h: usize, w: usize) -> Vec<Tensor> {
    (0..steps)
        .map(|_| {
            let data = (0..2 * h * w)
                .map(|_| if rng.random_bool(0.4) { rng.random_range(0..3) as f64 } else { 0.0 })
                .collect();
            Tensor::from_vec(&[2, h, w], data)
        })
        .collect()
}

/// Default-initialised sampler weights with randomised biases, as a
/// parameter set.
pub fn sampler_params(rng: &mut impl Rng) -> ParamSet {
    let mut w = SamplerWeights::init(3, rng);
    for v in w.tensors_mut()[2].data_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    for v in w.tensors_mut()[5].data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut p = ParamSet::new();
    for (n, t) in SAMPLER_PARAM_NAMES.iter().zip(w.tensors()) {
        p.push(*n, t.clone());
    }
    p
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerFd {
    pub max_rel_error: f64,
    pub tested: usize,
    pub skipped: usize,
}

/// Finite-difference check of a random linear readout of the embedding of a
/// random sampler, with the tape in `spike_mode`. A case where every sampled
/// coordinate flips a spike reports nothing tested.
pub fn sampler_check(seed: u64, mode: SamplerMode, rpd: bool, sat: bool, spike_mode: SpikeMode) -> SamplerFd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, h, w) = (rng.random_range(3..=8), rng.random_range(2..=5), rng.random_range(2..=5));
    let frames = random_frames(&mut rng, steps, h, w);
    let params = sampler_params(&mut rng);
    let cfg = SamplerConfig {
        mode,
        rpd,
        sat,
        slots: rng.random_range(1..=3),
        ..Default::default()
    };
    let readout: Vec<f64> = (0..cfg.slots * 2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var, GradError> {
        let p: [Var; 6] = vars.try_into().unwrap();
        let sv = record_sampler(tape, &frames, &p, &cfg).unwrap();
        let (emb, _) = record_embedding(tape, &sv, &cfg).unwrap();
        Ok(tape.weighted_sum(emb, readout.clone()))
    };
    let fd = FdConfig {
        trials: 24,
        mode: spike_mode,
        ..Default::default()
    };
    match finite_diff_check(&objective, &params, &fd, &mut rng) {
        Ok(r) => SamplerFd {
            max_rel_error: r.max_rel_error,
            tested: r.tested,
            skipped: r.skipped,
        },
        Err(GradError::AllCoordinatesUnstable { skipped }) => SamplerFd {
            max_rel_error: 0.0,
            tested: 0,
            skipped,
        },
        Err(e) => panic!("seed {seed}: {e}"),
    }
}
