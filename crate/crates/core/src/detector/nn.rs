//! Minimal layers with explicit backward passes. Activations are `f32`,
//! channel-major (`C x H x W`) per image.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the addressed elements (checked above)
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn normal_init(len: usize, std: f32, rng: &mut impl Rng) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Square-kernel 2-D convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out x (in * k * k)`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// What a convolution keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Vec<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f32,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: normal_init(out_channels * in_channels * kernel * kernel, std, rng),
            bias: vec![0.0; out_channels],
        }
    }

    /// He-initialised convolution.
    pub fn he(in_c: usize, out_c: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_c * kernel * kernel) as f32).sqrt();
        Self::new(in_c, out_c, kernel, stride, kernel / 2, std, rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let ohw = oh * ow;
        let mut col = vec![0.0f32; self.in_channels * k * k * ohw];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let ohw = oh * ow;
        let mut dx = vec![0.0f32; self.in_channels * h * w];
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        debug_assert_eq!(x.len(), self.in_channels * h * w);
        let (oh, ow) = self.output_size(h, w);
        let col = self.im2col(x, h, w, oh, ow);
        let ohw = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut y = vec![0.0f32; self.out_channels * ohw];
        for (o, row) in y.chunks_mut(ohw).enumerate() {
            row.fill(self.bias[o]);
        }
        gemm(self.out_channels, kk, ohw, &self.weight, false, &col, false, 1.0, &mut y);
        let cache = ConvCache {
            col,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
        };
        (y, cache)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &ConvCache, dy: &[f32], grad: &mut Conv2d, need_dx: bool) -> Option<Vec<f32>> {
        let ohw = cache.out_h * cache.out_w;
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(self.out_channels, ohw, kk, dy, false, &cache.col, true, 1.0, &mut grad.weight);
        for (o, row) in dy.chunks(ohw).enumerate() {
            grad.bias[o] += row.iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0f32; kk * ohw];
        gemm(kk, self.out_channels, ohw, &self.weight, true, dy, false, 0.0, &mut dcol);
        Some(self.col2im(&dcol, cache.in_h, cache.in_w, cache.out_h, cache.out_w))
    }
}

/// Fully connected layer, `y = W x + b`, applied to a batch of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, std: f32, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: normal_init(in_features * out_features, std, rng),
            bias: vec![0.0; out_features],
        }
    }

    /// `x` is `n x in`; returns `n x out`.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        gemm(n, self.in_features, self.out_features, x, false, &self.weight, true, 1.0, &mut y);
        y
    }

    pub fn backward(&self, x: &[f32], dy: &[f32], n: usize, grad: &mut Linear, need_dx: bool) -> Option<Vec<f32>> {
        gemm(self.out_features, n, self.in_features, dy, true, x, false, 1.0, &mut grad.weight);
        for row in dy.chunks(self.out_features) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0f32; n * self.in_features];
        gemm(n, self.out_features, self.in_features, dy, false, &self.weight, false, 0.0, &mut dx);
        Some(dx)
    }

    /// Appends output rows.
    pub fn append_rows(&mut self, weight: &[f32], bias: &[f32]) {
        debug_assert_eq!(weight.len(), bias.len() * self.in_features);
        self.weight.extend_from_slice(weight);
        self.bias.extend_from_slice(bias);
        self.out_features += bias.len();
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the (post-activation) output was not positive.
pub fn relu_backward(out: &[f32], dy: &mut [f32]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}
