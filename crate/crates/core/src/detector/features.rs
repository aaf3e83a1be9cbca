//! Shared feature tensors, RoI pooling and per-proposal spatial attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Backbone output for one image, `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Vec<f32>,
}

impl FeatureTensor {
    pub fn filled(channels: usize, height: usize, width: usize, stride: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            values: vec![value; channels * height * width],
        }
    }
}

/// Pooled `C x S x S` feature of one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    size: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * size * size {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{size}x{size} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map has non-finite values"));
        }
        Ok(Self {
            channels,
            size,
            values,
        })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            values: vec![0.0; channels * size * size],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.size == other.size
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.values[(d * self.size + y) * self.size + x]
    }
}

/// `S x S` non-negative spatial attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    size: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape(format!("{} values for {size}x{size} attention", values.len())));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("attention entries must be non-negative"));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.size + x]
    }
}

/// `A(s1, s2) = sum_d |F(d, s1, s2)|^p`.
pub fn attention_map(f: &FeatureMap, p: f64) -> Result<AttentionMap> {
    if !(p > 0.0) {
        return Err(Error::invalid(format!("attention exponent must be positive, got {p}")));
    }
    let ss = f.size * f.size;
    let mut a = vec![0.0; ss];
    for plane in f.values.chunks(ss) {
        for (acc, &v) in a.iter_mut().zip(plane) {
            *acc += pow_abs(v, p);
        }
    }
    Ok(AttentionMap { size: f.size, values: a })
}

#[inline]
pub(crate) fn pow_abs(v: f64, p: f64) -> f64 {
    if p == 2.0 {
        v * v
    } else {
        v.abs().powf(p)
    }
}

/// Bilinear sample locations of one RoI bin: 2x2 points per bin.
const SAMPLES: usize = 2;

/// A bilinear tap: four neighbour indices within a plane and their weights.
#[derive(Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    lx: f32,
    ly: f32,
}

fn bilinear_tap(y: f32, x: f32, h: usize, w: usize) -> Option<Tap> {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y_lo, y_hi, ly) = if y as usize >= h - 1 {
        (h - 1, h - 1, 0.0)
    } else {
        let lo = y as usize;
        (lo, lo + 1, y - lo as f32)
    };
    let (x_lo, x_hi, lx) = if x as usize >= w - 1 {
        (w - 1, w - 1, 0.0)
    } else {
        let lo = x as usize;
        (lo, lo + 1, x - lo as f32)
    };
    Some(Tap {
        idx: [y_lo * w + x_lo, y_lo * w + x_hi, y_hi * w + x_lo, y_hi * w + x_hi],
        lx,
        ly,
    })
}

/// Sampling taps for every output cell of one RoI, `S*S` groups of
/// `SAMPLES^2` optional taps.
fn roi_taps(features: &FeatureTensor, roi: &BoundingBox, size: usize) -> Vec<[Option<Tap>; SAMPLES * SAMPLES]> {
    let scale = 1.0 / features.stride as f32;
    // degenerate boxes pool from at least one feature cell, kept on the map
    let rw = (roi.w() * scale).max(1.0);
    let rh = (roi.h() * scale).max(1.0);
    let x0 = (roi.u() * scale - 0.5).min(features.width as f32 - 0.5 - rw);
    let y0 = (roi.v() * scale - 0.5).min(features.height as f32 - 0.5 - rh);
    let bw = rw / size as f32;
    let bh = rh / size as f32;
    let mut taps = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut cell = [None; SAMPLES * SAMPLES];
            for iy in 0..SAMPLES {
                let y = y0 + py as f32 * bh + (iy as f32 + 0.5) * bh / SAMPLES as f32;
                for ix in 0..SAMPLES {
                    let x = x0 + px as f32 * bw + (ix as f32 + 0.5) * bw / SAMPLES as f32;
                    cell[iy * SAMPLES + ix] = bilinear_tap(y, x, features.height, features.width);
                }
            }
            taps.push(cell);
        }
    }
    taps
}

#[inline]
fn sample(plane: &[f32], t: &Tap) -> f32 {
    let [i00, i01, i10, i11] = t.idx;
    let top = plane[i00] + t.lx * (plane[i01] - plane[i00]);
    let bot = plane[i10] + t.lx * (plane[i11] - plane[i10]);
    top + t.ly * (bot - top)
}

/// RoIAlign over a batch of boxes; output is `P x (C * S * S)` row-major.
pub fn roi_align(features: &FeatureTensor, rois: &[BoundingBox], size: usize) -> Vec<f32> {
    let c = features.channels;
    let hw = features.height * features.width;
    let ss = size * size;
    let mut out = vec![0.0f32; rois.len() * c * ss];
    for (r, roi) in rois.iter().enumerate() {
        let taps = roi_taps(features, roi, size);
        let dst = &mut out[r * c * ss..(r + 1) * c * ss];
        for d in 0..c {
            let plane = &features.values[d * hw..(d + 1) * hw];
            for (cell, t) in taps.iter().enumerate() {
                let v = |k: usize| t[k].as_ref().map_or(0.0, |tap| sample(plane, tap));
                // pairwise sum keeps constant fields exact
                let s = (v(0) + v(1)) + (v(2) + v(3));
                dst[d * ss + cell] = s * 0.25;
            }
        }
    }
    out
}

/// Scatters `dpooled` (`P x C*S*S`) back onto a feature gradient buffer.
pub fn roi_align_backward(
    features: &FeatureTensor,
    rois: &[BoundingBox],
    size: usize,
    dpooled: &[f32],
    dfeatures: &mut [f32],
) {
    let c = features.channels;
    let hw = features.height * features.width;
    let ss = size * size;
    for (r, roi) in rois.iter().enumerate() {
        let taps = roi_taps(features, roi, size);
        let src = &dpooled[r * c * ss..(r + 1) * c * ss];
        for d in 0..c {
            let plane = &mut dfeatures[d * hw..(d + 1) * hw];
            for (cell, t) in taps.iter().enumerate() {
                let g = src[d * ss + cell] * 0.25;
                if g == 0.0 {
                    continue;
                }
                for tap in t.iter().flatten() {
                    let (lx, ly) = (tap.lx, tap.ly);
                    let w = [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx];
                    for (i, wi) in tap.idx.iter().zip(w) {
                        plane[*i] += g * wi;
                    }
                }
            }
        }
    }
}

/// Splits a pooled batch into per-proposal [`FeatureMap`]s.
pub fn to_feature_maps(pooled: &[f32], channels: usize, size: usize) -> Vec<FeatureMap> {
    pooled
        .chunks(channels * size * size)
        .map(|chunk| FeatureMap {
            channels,
            size,
            values: chunk.iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

/// RoI pooling returning [`FeatureMap`]s.
pub fn roi_pool(features: &FeatureTensor, rois: &[BoundingBox], size: usize) -> Vec<FeatureMap> {
    to_feature_maps(&roi_align(features, rois, size), features.channels, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureTensor {
        let mut f = FeatureTensor::filled(c, h, w, 4, 0.0);
        for d in 0..c {
            for y in 0..h {
                for x in 0..w {
                    f.values[(d * h + y) * w + x] = d as f32 + 0.5 * y as f32 + 0.25 * x as f32;
                }
            }
        }
        f
    }

    #[test]
    fn constant_field_pools_exactly() {
        let f = FeatureTensor::filled(3, 5, 6, 4, 3.0);
        for roi in [
            BoundingBox::new(0.0, 0.0, 24.0, 20.0).unwrap(),
            BoundingBox::new(3.3, 7.1, 5.2, 9.9).unwrap(),
            BoundingBox::new(23.0, 19.0, 1.0, 1.0).unwrap(),
        ] {
            assert!(roi_pool(&f, &[roi], 7)[0].values().iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn identical_rois_identical_maps() {
        let f = ramp(2, 5, 6);
        let r = BoundingBox::new(2.0, 3.0, 10.0, 8.0).unwrap();
        let m = roi_pool(&f, &[r, r], 3);
        assert_eq!(m[0], m[1]);
    }

    #[test]
    fn linear_field_matches_centre_values() {
        // RoIAlign of a linear field equals the field at the sample mean,
        // i.e. at the bin centre, away from clamped borders.
        let f = ramp(1, 8, 8);
        let roi = BoundingBox::new(8.0, 8.0, 12.0, 12.0).unwrap();
        let m = roi_pool(&f, &[roi], 3);
        for py in 0..3 {
            for px in 0..3 {
                let y = 8.0 / 4.0 - 0.5 + (py as f64 + 0.5) * 1.0;
                let x = 8.0 / 4.0 - 0.5 + (px as f64 + 0.5) * 1.0;
                let want = 0.5 * y + 0.25 * x;
                assert!((m[0].at(0, py, px) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let f = ramp(2, 5, 6);
        let rois = [
            BoundingBox::new(1.0, 2.0, 13.0, 9.0).unwrap(),
            BoundingBox::new(0.0, 0.0, 24.0, 20.0).unwrap(),
        ];
        let size = 3;
        let g: Vec<f32> = (0..2 * 2 * 9).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let mut df = vec![0.0f32; f.values.len()];
        roi_align_backward(&f, &rois, size, &g, &mut df);
        // <g, A x> == <A^T g, x> for the linear pooling operator A
        let ax = roi_align(&f, &rois, size);
        let lhs: f64 = g.iter().zip(&ax).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = df.iter().zip(&f.values).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn attention_cases() {
        let f = FeatureMap::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(attention_map(&f, 2.0).unwrap().values(), &[4.0]);
        let z = FeatureMap::zeros(3, 2);
        assert!(attention_map(&z, 2.0).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(attention_map(&f, 0.0).is_err());
        assert!(attention_map(&f, -1.0).is_err());
    }
}
