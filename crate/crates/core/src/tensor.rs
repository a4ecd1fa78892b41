//! Dense row-major `f64` tensors and the convolution kernels shared by the
//! forward model, the tape and the op counter.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a 2-D convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output positions `(oy, ox)` and kernel taps `(ky, kx)` that read input
    /// pixel `(iy, ix)`. Calls `f(out_offset, ky * k + kx)` for each.
    #[inline]
    fn for_each_tap(&self, iy: usize, ix: usize, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        for ky in 0..k {
            let num_y = iy + self.padding;
            if num_y < ky || !(num_y - ky).is_multiple_of(self.stride) {
                continue;
            }
            let oy = (num_y - ky) / self.stride;
            if oy >= oh {
                continue;
            }
            for kx in 0..k {
                let num_x = ix + self.padding;
                if num_x < kx || !(num_x - kx).is_multiple_of(self.stride) {
                    continue;
                }
                let ox = (num_x - kx) / self.stride;
                if ox >= ow {
                    continue;
                }
                f(oy * ow + ox, ky * k + kx);
            }
        }
    }

    /// Number of valid (non-padding) taps an input pixel feeds, per output channel.
    pub fn fan_out(&self, iy: usize, ix: usize) -> usize {
        let mut n = 0;
        self.for_each_tap(iy, ix, |_, _| n += 1);
        n
    }
}

/// Cross-correlation `out[o] = Σ_i w[o, i] ⋆ x[i]`, written as a scatter over
/// non-zero inputs so sparse count frames and spike maps are cheap.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.kernel * g.kernel;
    let plane = oh * ow;
    let mut out = vec![0.0; g.out_channels * plane];
    for ci in 0..g.in_channels {
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let v = x[(ci * g.in_h + iy) * g.in_w + ix];
                if v == 0.0 {
                    continue;
                }
                g.for_each_tap(iy, ix, |o_off, tap| {
                    for co in 0..g.out_channels {
                        out[co * plane + o_off] += w[(co * g.in_channels + ci) * kk + tap] * v;
                    }
                });
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: returns `(d_input, d_kernel)`; either may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.kernel * g.kernel;
    let plane = oh * ow;
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let mut dw = want_kernel.then(|| vec![0.0; w.len()]);
    for ci in 0..g.in_channels {
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let idx = (ci * g.in_h + iy) * g.in_w + ix;
                let v = x[idx];
                let mut acc = 0.0;
                g.for_each_tap(iy, ix, |o_off, tap| {
                    for co in 0..g.out_channels {
                        let go = d_out[co * plane + o_off];
                        let wi = (co * g.in_channels + ci) * kk + tap;
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] += go * v;
                        }
                        acc += go * w[wi];
                    }
                });
                if let Some(dx) = dx.as_mut() {
                    dx[idx] = acc;
                }
            }
        }
    }
    (dx, dw)
}
