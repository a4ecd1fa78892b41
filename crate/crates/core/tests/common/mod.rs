//! Straightforward reference implementations used as test oracles. Nothing
//! here calls into the library's numeric code; `drivers` holds the shared
//! helpers that do.

#![allow(dead_code)]

pub mod drivers;

use rand::Rng;

/// Zero-padded 2-D convolution over `(c_in, h, w)` input, one output pixel at
/// a time.
pub fn naive_conv(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x[(i * h + iy as usize) * wd + ix as usize];
                            acc += w[((o * c_in + i) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NaiveMode {
    Snn,
    Recurrent,
}

pub struct NaiveSamplerWeights<'a> {
    pub w_in_ff: &'a [f64],
    pub w_in_rec: &'a [f64],
    pub b_in: &'a [f64],
    pub w_gate_ff: &'a [f64],
    pub w_gate_rec: &'a [f64],
    pub b_gate: &'a [f64],
}

/// Per-step `(u, v, s, gamma)` of the sampler with hard reset.
pub struct NaiveTrace {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

pub fn naive_sampler(
    frames: &[Vec<f64>],
    h: usize,
    w: usize,
    k: usize,
    wt: &NaiveSamplerWeights,
    mode: NaiveMode,
    theta: f64,
    snn_decay: f64,
    u_reset: f64,
) -> NaiveTrace {
    let n = 2 * h * w;
    let mut tr = NaiveTrace {
        u: vec![],
        v: vec![],
        s: vec![],
        gamma: vec![],
    };
    let mut v_prev = vec![0.0; n];
    let mut s_prev = vec![0.0; n];
    for (t, f) in frames.iter().enumerate() {
        let (ff, _, _) = naive_conv(f, wt.w_in_ff, 2, 2, k, 1, k / 2, h, w);
        let mut u = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        match mode {
            NaiveMode::Snn => {
                for i in 0..n {
                    u[i] = snn_decay * v_prev[i] + (ff[i] + wt.b_in[i / (h * w)]);
                }
            }
            NaiveMode::Recurrent => {
                let (gf, _, _) = naive_conv(f, wt.w_gate_ff, 2, 2, k, 1, k / 2, h, w);
                let (ir, gr) = if t == 0 {
                    (vec![0.0; n], vec![0.0; n])
                } else {
                    (
                        naive_conv(&s_prev, wt.w_in_rec, 2, 2, k, 1, k / 2, h, w).0,
                        naive_conv(&s_prev, wt.w_gate_rec, 2, 2, k, 1, k / 2, h, w).0,
                    )
                };
                for i in 0..n {
                    let c = i / (h * w);
                    let current = ff[i] + ir[i] + wt.b_in[c];
                    gamma[i] = sigmoid(gf[i] + gr[i] + wt.b_gate[c]);
                    u[i] = gamma[i] * v_prev[i] + current;
                }
            }
        }
        let s: Vec<f64> = u.iter().map(|&x| if x >= theta { 1.0 } else { 0.0 }).collect();
        let v: Vec<f64> = u
            .iter()
            .zip(&s)
            .map(|(&x, &sp)| if sp == 1.0 { u_reset } else { x })
            .collect();
        v_prev = v.clone();
        s_prev = s.clone();
        tr.u.push(u);
        tr.v.push(v);
        tr.s.push(s);
        if mode == NaiveMode::Recurrent {
            tr.gamma.push(gamma);
        }
    }
    tr
}

/// Consecutive-spike scan: `(open, close)` 1-based inclusive step pairs.
pub fn brute_windows(spikes: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut last = 0;
    for (i, &s) in spikes.iter().enumerate() {
        if s {
            out.push((last + 1, i + 1));
            last = i + 1;
        }
    }
    out
}

/// Window embedding of a single neuron from its potentials and spikes.
pub fn brute_embedding(u: &[f64], spikes: &[bool], slots: usize, rpd: bool) -> Vec<f64> {
    let mut out = vec![0.0; slots];
    let windows = brute_windows(spikes);
    for (k, &(a, b)) in windows.iter().enumerate() {
        let slot = k.min(slots - 1);
        for t in a..=b {
            out[slot] += u[t - 1];
        }
    }
    if !rpd {
        let last = windows.last().map_or(0, |w| w.1);
        let residual: f64 = u[last..].iter().sum();
        let slot = windows.len().min(slots).saturating_sub(1);
        out[slot] += residual;
    }
    out
}

pub struct NaiveHead<'a> {
    pub c1: usize,
    pub c2: usize,
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub wf: &'a [f64],
    pub bf: &'a [f64],
    pub grid: usize,
    pub spiking: bool,
    pub decay: f64,
    pub theta: f64,
}

fn naive_pool(x: &[f64], c: usize, h: usize, w: usize, g: usize) -> Vec<f64> {
    let range = |i: usize, len: usize| {
        let lo = i * len / g;
        let hi = ((i + 1) * len).div_ceil(g).max(lo + 1).min(len);
        (lo, hi)
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for gy in 0..g {
            for gx in 0..g {
                let (y0, y1) = range(gy, h);
                let (x0, x1) = range(gx, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[(ch * h + y) * w + xx];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

/// Logits of the detection head over `(2, h, w)` slots fed in order.
pub fn naive_head(slots: &[Vec<f64>], h: usize, w: usize, p: &NaiveHead) -> Vec<f64> {
    let mut mem: [Option<Vec<f64>>; 2] = [None, None];
    let mut features = Vec::new();
    for x in slots {
        let (mut a, h1, w1) = naive_conv(x, p.w1, 2, p.c1, 3, 2, 1, h, w);
        for (i, v) in a.iter_mut().enumerate() {
            *v += p.b1[i / (h1 * w1)];
        }
        let a = activate(a, &mut mem[0], p);
        let (mut b, h2, w2) = naive_conv(&a, p.w2, p.c1, p.c2, 3, 2, 1, h1, w1);
        for (i, v) in b.iter_mut().enumerate() {
            *v += p.b2[i / (h2 * w2)];
        }
        let b = activate(b, &mut mem[1], p);
        features.extend(naive_pool(&b, p.c2, h2, w2, p.grid));
    }
    (0..5)
        .map(|o| {
            let row = &p.wf[o * features.len()..(o + 1) * features.len()];
            row.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>() + p.bf[o]
        })
        .collect()
}

fn activate(a: Vec<f64>, mem: &mut Option<Vec<f64>>, p: &NaiveHead) -> Vec<f64> {
    if !p.spiking {
        return a.into_iter().map(|v| v.max(0.0)).collect();
    }
    let u: Vec<f64> = match mem.as_ref() {
        Some(v) => v.iter().zip(&a).map(|(v, a)| p.decay * v + a).collect(),
        None => a,
    };
    let s: Vec<f64> = u.iter().map(|&x| if x >= p.theta { 1.0 } else { 0.0 }).collect();
    *mem = Some(u.iter().zip(&s).map(|(u, s)| u - p.theta * s).collect());
    s
}

/// Sparse random count frame: `(2, h, w)` with small integer counts.
pub fn random_counts(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Vec<f64> {
    (0..2 * h * w)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(1..4) as f64
            } else {
                0.0
            }
        })
        .collect()
}
