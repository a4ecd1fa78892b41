//! Central finite-difference verification of tape gradients, and the scalar
//! check of the spike-aware aggregation factor.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::optim::ParamSet;
use super::tape::{AggregationPlan, AggregationTerm, GradError, SpikeMode, Tape, Var};
use crate::neuron::SurrogateSpec;
use crate::tensor::Tensor;

/// A scalar function of a parameter set, recorded on a tape.
pub trait Objective {
    fn record(&self, tape: &mut Tape, params: &[Var]) -> Result<Var, GradError>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
{
    fn record(&self, tape: &mut Tape, params: &[Var]) -> Result<Var, GradError> {
        self(tape, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub eps: f64,
    /// Coordinates to test; all of them when this exceeds the parameter count.
    pub trials: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// [`SpikeMode::Exact`] or [`SpikeMode::Relaxed`]; the surrogate mode does
    /// not differentiate its own forward pass.
    pub mode: SpikeMode,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            trials: 64,
            floor: 1e-3,
            mode: SpikeMode::Relaxed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub tested: usize,
    /// Coordinates whose `±ε` perturbation changed a spike or ReLU decision.
    pub skipped: usize,
    pub worst: Option<FdCoordinate>,
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate(obj: &impl Objective, params: &ParamSet, mode: SpikeMode) -> Result<(f64, Vec<bool>), GradError> {
    let mut tape = Tape::new(mode);
    let vars = params.register(&mut tape);
    let loss = obj.record(&mut tape, &vars)?;
    Ok((tape.value(loss).data()[0], tape.decisions().to_vec()))
}

/// Compares tape gradients against central differences on coordinates whose
/// perturbation leaves every discrete decision unchanged.
pub fn finite_diff_check(
    obj: &impl Objective,
    params: &ParamSet,
    cfg: &FdConfig,
    rng: &mut impl Rng,
) -> Result<FdReport, GradError> {
    let mut tape = Tape::new(cfg.mode);
    let vars = params.register(&mut tape);
    let loss = obj.record(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base_decisions = tape.decisions().to_vec();

    let mut coords = Vec::with_capacity(params.element_count());
    for (p, t) in params.tensors().iter().enumerate() {
        coords.extend((0..t.len()).map(|j| (p, j)));
    }
    let chosen: Vec<(usize, usize)> = if cfg.trials >= coords.len() {
        coords
    } else {
        let mut idx = sample(rng, coords.len(), cfg.trials).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        tested: 0,
        skipped: 0,
        worst: None,
    };
    for (p, j) in chosen {
        let mut shifted = params.clone();
        let x = params.get(p).data()[j];
        shifted.tensors_mut()[p].data_mut()[j] = x + cfg.eps;
        let (plus, d_plus) = evaluate(obj, &shifted, cfg.mode)?;
        shifted.tensors_mut()[p].data_mut()[j] = x - cfg.eps;
        let (minus, d_minus) = evaluate(obj, &shifted, cfg.mode)?;
        if d_plus != base_decisions || d_minus != base_decisions {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let analytic = grads.param(p).map_or(0.0, |g| g[j]);
        let rel = relative_error(analytic, numeric, cfg.floor);
        report.tested += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(FdCoordinate {
                param: params.names()[p].clone(),
                index: j,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    if report.tested == 0 {
        return Err(GradError::AllCoordinatesUnstable {
            skipped: report.skipped,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SatFactorReport {
    /// `∂f̂/∂u_{t^k}` with spike-aware aggregation over the same without it.
    pub ratio: f64,
    /// `1 + (Σ u)·h_α(u_{t^k} - θ)`
    pub expected: f64,
    pub abs_error: f64,
}

/// Single neuron, single window closed by a spike at the last step of `us`:
/// the gradient of `f̂ = s_{t^k}·Σu` with respect to `u_{t^k}` against the
/// plain window sum.
pub fn sat_gradient_factor_check(
    us: &[f64],
    theta: f64,
    surrogate: SurrogateSpec,
) -> Result<SatFactorReport, GradError> {
    let last = us.len().checked_sub(1).ok_or_else(|| GradError::ShapeMismatch("empty potential sequence".into()))?;
    if us[last] < theta {
        return Err(GradError::ShapeMismatch("the window must be closed by a spike".into()));
    }
    let plan = Rc::new(AggregationPlan {
        slots: 1,
        neurons: 1,
        steps: us.len(),
        terms: vec![AggregationTerm {
            neuron: 0,
            slot: 0,
            first: 0,
            last: last as u16,
            spike_step: Some(last as u16),
        }],
    });
    let grad_last = |sat: bool| -> Result<f64, GradError> {
        let mut tape = Tape::new(SpikeMode::Surrogate);
        let u: Vec<Var> = us
            .iter()
            .enumerate()
            .map(|(i, &x)| tape.param(i, Tensor::scalar(x)))
            .collect();
        let s: Vec<Var> = u.iter().map(|&v| tape.spike(v, theta, surrogate)).collect();
        let f = tape.aggregate(&u, &s, plan.clone(), sat);
        let loss = tape.weighted_sum(f, vec![1.0]);
        let g = tape.backward(loss)?;
        Ok(g.param(last).map_or(0.0, |g| g[0]))
    };
    let ratio = grad_last(true)? / grad_last(false)?;
    let sum: f64 = us.iter().sum();
    let expected = 1.0 + sum * surrogate.eval(us[last] - theta);
    Ok(SatFactorReport {
        ratio,
        expected,
        abs_error: (ratio - expected).abs(),
    })
}
