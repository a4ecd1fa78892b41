use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingSequence;
use super::forward::SamplerTrace;
use super::SamplerError;
use crate::event::{EventStream, SensorSize};
use crate::grad::{aggregate_values, AggregationPlan, AggregationTerm};
use crate::repr::{bin_of, events_in, TimeWindow};
use crate::tensor::Tensor;

/// Steps `open..=close` (1-based) of one neuron, closed by a spike at `close`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleWindow {
    /// Flat neuron index `(p·H + y)·W + x`.
    pub neuron: usize,
    /// 0-based window index along the neuron's spike train.
    pub k: usize,
    pub open: usize,
    pub close: usize,
}

impl SampleWindow {
    /// `(x, y, p)` of the owning neuron.
    pub fn coords(&self, sensor: SensorSize) -> (u16, u16, u8) {
        let w = sensor.width as usize;
        let h = sensor.height as usize;
        let x = self.neuron % w;
        let y = (self.neuron / w) % h;
        let p = self.neuron / (w * h);
        (x as u16, y as u16, p as u8)
    }
}

/// `(open, close)` pairs, 1-based and inclusive, between consecutive spikes.
pub fn spike_windows(spikes: impl IntoIterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open = 1;
    for (i, s) in spikes.into_iter().enumerate() {
        if s {
            out.push((open, i + 1));
            open = i + 2;
        }
    }
    out
}

/// Spike-closed windows of every neuron, indexed by flat neuron index.
pub fn extract_windows(trace: &SamplerTrace) -> Vec<Vec<SampleWindow>> {
    (0..trace.neurons())
        .map(|n| {
            spike_windows(trace.s.iter().map(|s| s.data()[n] != 0.0))
                .into_iter()
                .enumerate()
                .map(|(k, (open, close))| SampleWindow {
                    neuron: n,
                    k,
                    open,
                    close,
                })
                .collect()
        })
        .collect()
}

/// Aggregation plan for spike-closed windows: window `k` fills slot
/// `min(k, K-1)`; without RPD the steps after the last spike go to the last
/// filled slot, or slot 0 for a silent neuron.
pub fn plan_from_windows(
    windows: &[Vec<SampleWindow>],
    steps: usize,
    slots: usize,
    rpd: bool,
) -> Result<AggregationPlan, SamplerError> {
    if slots == 0 {
        return Err(SamplerError::InvalidK(slots));
    }
    let mut terms = Vec::new();
    for (n, ws) in windows.iter().enumerate() {
        let mut last_close = 0;
        for (k, w) in ws.iter().enumerate() {
            if w.open < 1 || w.open > w.close || w.close > steps || w.open != last_close + 1 {
                return Err(SamplerError::ShapeMismatch(format!(
                    "window {k} of neuron {n} ({}..={}) is not contiguous within {steps} steps",
                    w.open, w.close
                )));
            }
            terms.push(AggregationTerm {
                neuron: n as u32,
                slot: k.min(slots - 1) as u16,
                first: (w.open - 1) as u16,
                last: (w.close - 1) as u16,
                spike_step: Some((w.close - 1) as u16),
            });
            last_close = w.close;
        }
        if !rpd && last_close < steps {
            terms.push(AggregationTerm {
                neuron: n as u32,
                slot: ws.len().saturating_sub(1).min(slots - 1) as u16,
                first: last_close as u16,
                last: (steps - 1) as u16,
                spike_step: None,
            });
        }
    }
    Ok(AggregationPlan {
        slots,
        neurons: windows.len(),
        steps,
        terms,
    })
}

/// Plan built directly from per-step spike decisions `spikes[t][neuron]`.
pub fn adaptive_plan(spikes: &[&[bool]], slots: usize, rpd: bool) -> AggregationPlan {
    let neurons = spikes.first().map_or(0, |s| s.len());
    let windows: Vec<Vec<SampleWindow>> = (0..neurons)
        .map(|n| {
            spike_windows(spikes.iter().map(|s| s[n]))
                .into_iter()
                .enumerate()
                .map(|(k, (open, close))| SampleWindow {
                    neuron: n,
                    k,
                    open,
                    close,
                })
                .collect()
        })
        .collect();
    plan_from_windows(&windows, spikes.len(), slots, rpd).expect("windows from a spike train are contiguous")
}

/// Spike-independent plan: slot `j` sums steps `⌊jT/K⌋ .. ⌊(j+1)T/K⌋`.
pub fn fixed_plan(steps: usize, neurons: usize, slots: usize) -> AggregationPlan {
    let mut terms = Vec::new();
    for j in 0..slots {
        let (lo, hi) = (j * steps / slots, (j + 1) * steps / slots);
        if lo == hi {
            continue;
        }
        for n in 0..neurons {
            terms.push(AggregationTerm {
                neuron: n as u32,
                slot: j as u16,
                first: lo as u16,
                last: (hi - 1) as u16,
                spike_step: None,
            });
        }
    }
    AggregationPlan {
        slots,
        neurons,
        steps,
        terms,
    }
}

/// Sums the potentials of each window into `K` embedding slots.
pub fn aggregate_windows(
    trace: &SamplerTrace,
    windows: &[Vec<SampleWindow>],
    rpd: bool,
    sat: bool,
    slots: usize,
) -> Result<EmbeddingSequence, SamplerError> {
    if windows.len() != trace.neurons() {
        return Err(SamplerError::ShapeMismatch(format!(
            "{} window lists for {} neurons",
            windows.len(),
            trace.neurons()
        )));
    }
    let plan = plan_from_windows(windows, trace.steps(), slots, rpd)?;
    let us: Vec<&[f64]> = trace.u.iter().map(|t| t.data()).collect();
    let ss: Vec<&[f64]> = trace.s.iter().map(|t| t.data()).collect();
    let values = aggregate_values(&plan, &us, &ss, sat);
    let sensor = trace.sensor;
    let shape = [2, sensor.height as usize, sensor.width as usize];
    Ok(EmbeddingSequence {
        slots: values
            .chunks(sensor.bins())
            .map(|c| Tensor::from_vec(&shape, c.to_vec()))
            .collect(),
        sensor,
        mode: trace.mode,
        rpd,
        sat,
        steps: trace.steps(),
        step_us: trace.step_us,
        window: trace.window,
    })
}

/// Maps step windows back to raw events: for each neuron and each of its
/// windows, the indices of that neuron's events whose early-aggregation step
/// lies in `open..=close`. `window` and `steps` must be those the frames were
/// built with.
pub fn sample_events(
    stream: &EventStream,
    window: TimeWindow,
    steps: usize,
    windows: &[Vec<SampleWindow>],
) -> Vec<Vec<Vec<usize>>> {
    let sensor = stream.sensor();
    let mut out: Vec<Vec<Vec<usize>>> = windows.iter().map(|ws| vec![Vec::new(); ws.len()]).collect();
    let all = stream.events();
    let base = all.partition_point(|e| e.t < window.start);
    for (offset, e) in events_in(stream, window).iter().enumerate() {
        let Some(step) = bin_of(e.t, window, steps) else { continue };
        let step = step + 1;
        let n = sensor.bin_index(e.x, e.y, e.p);
        let Some(ws) = windows.get(n) else { continue };
        let k = ws.partition_point(|w| w.close < step);
        if let Some(w) = ws.get(k) {
            if w.open <= step {
                out[n][k].push(base + offset);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;
    use crate::sampler::SamplerMode;

    fn trace_from(us: &[f64], spikes: &[usize]) -> SamplerTrace {
        let sensor = SensorSize::new(1, 1);
        let n = us.len();
        let mk = |vals: Vec<f64>| Tensor::from_vec(&[2, 1, 1], vals);
        SamplerTrace {
            mode: SamplerMode::Arsnn,
            sensor,
            window: TimeWindow::new(0, 1000 * n as u64),
            step_us: 1000,
            u: us.iter().map(|&u| mk(vec![u, 0.0])).collect(),
            v: vec![mk(vec![0.0, 0.0]); n],
            s: (1..=n)
                .map(|t| mk(vec![if spikes.contains(&t) { 1.0 } else { 0.0 }, 0.0]))
                .collect(),
            gamma: Vec::new(),
        }
    }

    #[test]
    fn windows_between_spikes() {
        let mut spikes = [false; 8];
        spikes[2] = true;
        spikes[6] = true;
        assert_eq!(spike_windows(spikes), vec![(1, 3), (4, 7)]);
        assert!(spike_windows([false; 5]).is_empty());
    }

    #[test]
    fn single_window_sum() {
        let trace = trace_from(&[0.2, 0.5, 1.1], &[3]);
        let w = extract_windows(&trace);
        let emb = aggregate_windows(&trace, &w, true, true, 1).unwrap();
        assert!((emb.slots[0].data()[0] - 1.8).abs() < 1e-15);
        assert_eq!(emb.slots[0].data()[1], 0.0);
    }

    #[test]
    fn rpd_difference_is_residual() {
        let us = [0.3, 1.2, 0.1, 0.4, 1.0, 0.25, 0.5, 0.125];
        let trace = trace_from(&us, &[2, 5]);
        let w = extract_windows(&trace);
        let on = aggregate_windows(&trace, &w, true, false, 3).unwrap();
        let off = aggregate_windows(&trace, &w, false, false, 3).unwrap();
        assert_eq!(off.slots[1].data()[0] - on.slots[1].data()[0], 0.25 + 0.5 + 0.125);
        assert_eq!(off.slots[0], on.slots[0]);
        assert_eq!(on.slots[2].data()[0], 0.0);
    }

    #[test]
    fn silent_neuron() {
        let trace = trace_from(&[0.3, 0.4], &[]);
        let w = extract_windows(&trace);
        let on = aggregate_windows(&trace, &w, true, true, 2).unwrap();
        assert!(on.slots.iter().all(|s| s.data().iter().all(|&v| v == 0.0)));
        let off = aggregate_windows(&trace, &w, false, true, 2).unwrap();
        assert!((off.slots[0].data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn overflow_windows_merge_into_last_slot() {
        let trace = trace_from(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 3, 4]);
        let w = extract_windows(&trace);
        let emb = aggregate_windows(&trace, &w, true, false, 2).unwrap();
        assert_eq!(emb.slots[0].data()[0], 1.0);
        assert_eq!(emb.slots[1].data()[0], 9.0);
        assert_eq!(aggregate_windows(&trace, &w, true, false, 0).err(), Some(SamplerError::InvalidK(0)));
    }

    #[test]
    fn fixed_plan_chunks() {
        let plan = fixed_plan(8, 1, 3);
        let spans: Vec<(u16, u16)> = plan.terms.iter().map(|t| (t.first, t.last)).collect();
        assert_eq!(spans, vec![(0, 1), (2, 4), (5, 7)]);
        assert_eq!(fixed_plan(2, 1, 3).terms.len(), 2);
    }

    #[test]
    fn events_follow_their_windows() {
        let sensor = SensorSize::new(2, 1);
        // steps of 1000 us over [0, 8000]; event at 3500 lies in step 4
        let stream = EventStream::new(
            vec![
                Event::new(3500, 0, 0, 1),
                Event::new(3600, 0, 0, 0),
                Event::new(7999, 0, 0, 1),
            ],
            sensor,
        )
        .unwrap();
        let mut windows = vec![Vec::new(); sensor.bins()];
        let n = sensor.bin_index(0, 0, 1);
        windows[n] = vec![SampleWindow {
            neuron: n,
            k: 0,
            open: 4,
            close: 7,
        }];
        let picked = sample_events(&stream, TimeWindow::new(0, 8000), 8, &windows);
        assert_eq!(picked[n], vec![vec![0]]);
        assert!(picked[sensor.bin_index(0, 0, 0)].is_empty());
    }

    #[test]
    fn coords_round_trip() {
        let sensor = SensorSize::new(5, 3);
        for (x, y, p) in [(0, 0, 0), (4, 2, 1), (2, 1, 0)] {
            let w = SampleWindow {
                neuron: sensor.bin_index(x, y, p),
                k: 0,
                open: 1,
                close: 1,
            };
            assert_eq!(w.coords(sensor), (x, y, p));
        }
    }
}
