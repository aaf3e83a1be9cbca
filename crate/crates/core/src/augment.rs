//! Replay-time composition of buffered crops into training images.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::buffer::{BoxBuffer, BoxExemplar, MIN_CROP_SIDE};
use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BoundingBox, ClassId, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayKind {
    Mixup,
    Mosaic,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupParams {
    /// Shape parameters of the Beta law for the blend weight.
    pub beta_a: f64,
    pub beta_b: f64,
    pub overlap_threshold: f32,
    pub max_boxes: usize,
    /// Exemplars drawn from the buffer per mixup sample.
    pub candidates: usize,
    /// Placement attempts per candidate.
    pub retries: usize,
}

impl Default for MixupParams {
    fn default() -> Self {
        Self {
            beta_a: 1.0,
            beta_b: 1.0,
            overlap_threshold: 0.2,
            max_boxes: 2,
            candidates: 4,
            retries: 10,
        }
    }
}

impl MixupParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::invalid("mixup Beta parameters must be positive"));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::invalid("mixup overlap threshold must lie in [0, 1]"));
        }
        if self.max_boxes == 0 {
            return Err(Error::invalid("mixup max_boxes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicParams {
    pub mu_min: f32,
    pub mu_max: f32,
    pub fill: f32,
}

impl Default for MosaicParams {
    fn default() -> Self {
        Self {
            mu_min: 0.4,
            mu_max: 0.6,
            fill: 0.5,
        }
    }
}

/// Where one exemplar landed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class_id: ClassId,
    pub u: usize,
    pub v: usize,
    pub w: usize,
    pub h: usize,
    /// Blend weight of the underlying image (mixup only).
    pub lambda: Option<f32>,
    /// Scale draw (mosaic only).
    pub mu: Option<f32>,
}

impl Placement {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.u as f32, self.v as f32, self.w as f32, self.h as f32).expect("placement has positive size")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrace {
    /// Mosaic centre `(x, y)`.
    pub center: Option<(usize, usize)>,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSample {
    pub pixels: Image,
    /// Groundtruth first, then replayed boxes.
    pub annotations: Vec<Annotation>,
    pub num_groundtruth: usize,
    pub replay_kind: ReplayKind,
    pub trace: ReplayTrace,
}

impl ComposedSample {
    pub fn plain(pixels: Image, annotations: Vec<Annotation>) -> Self {
        Self {
            num_groundtruth: annotations.len(),
            pixels,
            annotations,
            replay_kind: ReplayKind::New,
            trace: ReplayTrace::default(),
        }
    }

    pub fn groundtruth(&self) -> &[Annotation] {
        &self.annotations[..self.num_groundtruth]
    }

    pub fn replayed(&self) -> &[Annotation] {
        &self.annotations[self.num_groundtruth..]
    }
}

/// The blend applied inside a mixup rectangle.
#[inline]
pub fn mix(lambda: f32, image: f32, exemplar: f32) -> f32 {
    lambda * image + (1.0 - lambda) * exemplar
}

/// Blends up to `max_boxes` candidates into `image` at random positions,
/// accepting a placement only if its IoU with every groundtruth box stays at
/// or below the overlap threshold and it does not touch an earlier replayed
/// box. One blend weight is drawn per accepted exemplar.
pub fn mixup_replay(
    image: &Image,
    annotations: &[Annotation],
    candidates: &[BoxExemplar],
    params: &MixupParams,
    rng: &mut impl Rng,
) -> Result<ComposedSample> {
    params.validate()?;
    let beta = Beta::new(params.beta_a, params.beta_b).map_err(|e| Error::invalid(e.to_string()))?;
    let (hh, ww) = (image.height(), image.width());
    let mut pixels = image.clone();
    let mut out = annotations.to_vec();
    let mut placements: Vec<Placement> = Vec::new();
    for ex in candidates {
        if placements.len() >= params.max_boxes {
            break;
        }
        let (w, h) = (ex.width(), ex.height());
        if w > ww || h > hh {
            continue;
        }
        for _ in 0..params.retries {
            let u = rng.random_range(0..=ww - w);
            let v = rng.random_range(0..=hh - h);
            let placed = BoundingBox::new(u as f32, v as f32, w as f32, h as f32)?;
            let overlap = annotations
                .iter()
                .map(|a| iou(&a.bbox, &placed))
                .fold(0.0f32, f32::max);
            if overlap > params.overlap_threshold {
                continue;
            }
            if placements.iter().any(|p| p.bbox().intersection_area(&placed) > 0.0) {
                continue;
            }
            let lambda = beta.sample(rng) as f32;
            for y in 0..h {
                for x in 0..w {
                    let a = pixels.pixel(v + y, u + x);
                    let b = ex.pixels.pixel(y, x);
                    pixels.set_pixel(v + y, u + x, std::array::from_fn(|c| mix(lambda, a[c], b[c])));
                }
            }
            placements.push(Placement {
                class_id: ex.class_id,
                u,
                v,
                w,
                h,
                lambda: Some(lambda),
                mu: None,
            });
            out.push(Annotation::new(placed, ex.class_id));
            break;
        }
    }
    Ok(ComposedSample {
        pixels,
        annotations: out,
        num_groundtruth: annotations.len(),
        replay_kind: ReplayKind::Mixup,
        trace: ReplayTrace {
            center: None,
            placements,
        },
    })
}

/// Tile size for an exemplar: longer side `mu` times half the canvas
/// dimension along that side, aspect preserved, then clamped to
/// `[MIN_CROP_SIDE, quadrant extent]`.
pub fn mosaic_tile_size(
    exemplar_w: usize,
    exemplar_h: usize,
    mu: f32,
    canvas_w: usize,
    canvas_h: usize,
    max_w: usize,
    max_h: usize,
) -> (usize, usize) {
    let (ew, eh) = (exemplar_w as f32, exemplar_h as f32);
    let (tw, th) = if ew >= eh {
        let tw = (mu * canvas_w as f32 / 2.0).round();
        (tw, (eh * tw / ew).round())
    } else {
        let th = (mu * canvas_h as f32 / 2.0).round();
        ((ew * th / eh).round(), th)
    };
    let clamp = |v: f32, max: usize| (v as usize).max(MIN_CROP_SIDE).min(max);
    (clamp(tw, max_w), clamp(th, max_h))
}

/// Four exemplars on a `fill`-valued canvas of the image's size, one per
/// quadrant around a random centre. The source image does not appear.
pub fn mosaic_replay(
    image: &Image,
    exemplars: &[BoxExemplar],
    params: &MosaicParams,
    rng: &mut impl Rng,
) -> Result<ComposedSample> {
    if exemplars.len() != 4 {
        return Err(Error::invalid(format!("mosaic needs 4 exemplars, got {}", exemplars.len())));
    }
    if !(params.mu_min > 0.0 && params.mu_min <= params.mu_max) {
        return Err(Error::invalid("mosaic scale range must satisfy 0 < min <= max"));
    }
    let (hh, ww) = (image.height(), image.width());
    if ww < 2 * MIN_CROP_SIDE || hh < 2 * MIN_CROP_SIDE {
        return Err(Error::invalid("image too small for a mosaic"));
    }
    let (cx, cy) = mosaic_center(ww, hh, rng);
    let mut pixels = Image::filled(hh, ww, params.fill);
    let mut annotations = Vec::with_capacity(4);
    let mut placements = Vec::with_capacity(4);
    for (q, ex) in exemplars.iter().enumerate() {
        let mu = rng.random_range(params.mu_min..=params.mu_max);
        let (left, top) = (q % 2 == 0, q < 2);
        let max_w = if left { cx } else { ww - cx };
        let max_h = if top { cy } else { hh - cy };
        let (tw, th) = mosaic_tile_size(ex.width(), ex.height(), mu, ww, hh, max_w, max_h);
        let u = if left { cx - tw } else { cx };
        let v = if top { cy - th } else { cy };
        let tile = ex.pixels.resize_bilinear(th, tw);
        pixels.paste(&tile, u, v)?;
        let p = Placement {
            class_id: ex.class_id,
            u,
            v,
            w: tw,
            h: th,
            lambda: None,
            mu: Some(mu),
        };
        annotations.push(Annotation::new(p.bbox(), ex.class_id));
        placements.push(p);
    }
    Ok(ComposedSample {
        pixels,
        annotations,
        num_groundtruth: 0,
        replay_kind: ReplayKind::Mosaic,
        trace: ReplayTrace {
            center: Some((cx, cy)),
            placements,
        },
    })
}

/// Centre drawn uniformly within the middle quarter band of each axis,
/// `[d/2 - d/8, d/2 + d/8]`, then kept at least `MIN_CROP_SIDE` from the
/// border.
pub fn mosaic_center(width: usize, height: usize, rng: &mut impl Rng) -> (usize, usize) {
    let pick = |d: usize, rng: &mut dyn rand::RngCore| {
        let lo = (d / 2 - d / 8).max(MIN_CROP_SIDE);
        let hi = (d / 2 + d / 8).min(d - MIN_CROP_SIDE).max(lo);
        rng.random_range(lo..=hi)
    };
    let cx = pick(width, rng);
    let cy = pick(height, rng);
    (cx, cy)
}

/// Relative weights of mixup, mosaic and plain samples.
pub const DEFAULT_REPLAY_RATIO: [f64; 3] = [1.0, 1.0, 2.0];

/// Mixup, mosaic and plain samples at 1:1:2.
pub fn choose_replay_type(rng: &mut impl Rng) -> ReplayKind {
    choose_replay_type_with(DEFAULT_REPLAY_RATIO, rng)
}

/// One uniform draw against the cumulative weights `[mixup, mosaic, new]`.
pub fn choose_replay_type_with(ratio: [f64; 3], rng: &mut impl Rng) -> ReplayKind {
    let u = rng.random::<f64>() * ratio.iter().sum::<f64>();
    if u < ratio[0] {
        ReplayKind::Mixup
    } else if u < ratio[0] + ratio[1] {
        ReplayKind::Mosaic
    } else {
        ReplayKind::New
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub mixup: MixupParams,
    pub mosaic: MosaicParams,
    pub enable_mixup: bool,
    pub enable_mosaic: bool,
    pub ratio: [f64; 3],
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mixup: MixupParams::default(),
            mosaic: MosaicParams::default(),
            enable_mixup: false,
            enable_mosaic: false,
            ratio: DEFAULT_REPLAY_RATIO,
        }
    }
}

impl ReplayConfig {
    pub fn enabled() -> Self {
        Self {
            enable_mixup: true,
            enable_mosaic: true,
            ..Self::default()
        }
    }
}

/// Draws a replay type and builds the sample. An empty buffer always yields
/// the plain image; a disabled or infeasible replay kind falls back to it.
pub fn compose(
    image: &Image,
    annotations: &[Annotation],
    buffer: &BoxBuffer,
    config: &ReplayConfig,
    rng: &mut impl Rng,
) -> Result<ComposedSample> {
    if buffer.is_empty() {
        return Ok(ComposedSample::plain(image.clone(), annotations.to_vec()));
    }
    match choose_replay_type_with(config.ratio, rng) {
        ReplayKind::Mixup if config.enable_mixup => {
            let candidates = buffer.sample_boxes(config.mixup.candidates, rng);
            mixup_replay(image, annotations, &candidates, &config.mixup, rng)
        }
        ReplayKind::Mosaic if config.enable_mosaic => {
            let mut picks = buffer.sample_boxes(4, rng);
            // small buffers repeat exemplars to fill the four quadrants
            let mut k = 0;
            while picks.len() < 4 {
                picks.push(picks[k].clone());
                k += 1;
            }
            mosaic_replay(image, &picks, &config.mosaic, rng)
        }
        _ => Ok(ComposedSample::plain(image.clone(), annotations.to_vec())),
    }
}

/// Copy of the sample with 1-pixel outlines: groundtruth in green, replayed
/// boxes in red.
pub fn render_preview(sample: &ComposedSample) -> Image {
    let mut img = sample.pixels.clone();
    for (i, a) in sample.annotations.iter().enumerate() {
        let color = if i < sample.num_groundtruth {
            [0.1, 0.9, 0.1]
        } else {
            [0.95, 0.1, 0.1]
        };
        draw_rect(&mut img, &a.bbox, color);
    }
    img
}

fn draw_rect(img: &mut Image, b: &BoundingBox, color: [f32; 3]) {
    let (x0, y0, w, h) = b.pixel_rect();
    let x1 = (x0 + w).min(img.width()).saturating_sub(1);
    let y1 = (y0 + h).min(img.height()).saturating_sub(1);
    for x in x0..=x1 {
        img.set_pixel(y0, x, color);
        img.set_pixel(y1, x, color);
    }
    for y in y0..=y1 {
        img.set_pixel(y, x0, color);
        img.set_pixel(y, x1, color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exemplar(class: u32, w: usize, h: usize, value: f32) -> BoxExemplar {
        BoxExemplar {
            pixels: Image::filled(h, w, value),
            class_id: ClassId(class),
            source_image: 0,
            source_box: BoundingBox::new(0.0, 0.0, w as f32, h as f32).unwrap(),
            distance: 0.0,
        }
    }

    #[test]
    fn lambda_one_keeps_pixels() {
        let img = Image::filled(32, 32, 0.4);
        let params = MixupParams {
            beta_a: 1e6,
            beta_b: 1e-6,
            ..MixupParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = mixup_replay(&img, &[], &[exemplar(1, 10, 10, 0.8)], &params, &mut rng).unwrap();
        let lam = s.trace.placements[0].lambda.unwrap();
        assert_eq!(lam, 1.0);
        assert_eq!(s.pixels, img);
        assert_eq!(s.replayed().len(), 1);
    }

    #[test]
    fn midpoint_blend() {
        assert!((mix(0.5, 0.4, 0.8) - 0.6).abs() < 1e-7);
    }

    #[test]
    fn guard_blocks_overlapping_candidate() {
        // exemplar as large as the image can only land on top of the groundtruth
        let img = Image::filled(16, 16, 0.3);
        let gt = [Annotation::new(BoundingBox::new(2.0, 2.0, 12.0, 12.0).unwrap(), ClassId(5))];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = mixup_replay(&img, &gt, &[exemplar(1, 16, 16, 0.9)], &MixupParams::default(), &mut rng).unwrap();
        assert_eq!(s.pixels, img);
        assert_eq!(s.annotations, gt.to_vec());
    }

    #[test]
    fn symmetric_mosaic() {
        let img = Image::filled(64, 64, 0.0);
        let ex: Vec<_> = (0..4).map(|_| exemplar(2, 20, 20, 0.7)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = mosaic_replay(&img, &ex, &MosaicParams { mu_min: 0.5, mu_max: 0.5, fill: 0.5 }, &mut rng).unwrap();
        assert_eq!(s.annotations.len(), 4);
        assert!(s.annotations.iter().all(|a| a.class_id == ClassId(2)));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(s.annotations[i].bbox.intersection_area(&s.annotations[j].bbox), 0.0);
            }
        }
        assert!(s.trace.placements.iter().all(|p| (p.w, p.h) == (16, 16)));
    }

    #[test]
    fn scheduler_without_buffer_is_plain() {
        let img = Image::filled(32, 32, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = compose(&img, &[], &BoxBuffer::new(10), &ReplayConfig::enabled(), &mut rng).unwrap();
            assert_eq!(s.replay_kind, ReplayKind::New);
        }
    }

    #[test]
    fn tile_size_clamps() {
        assert_eq!(mosaic_tile_size(40, 4, 0.5, 64, 64, 32, 32), (16, 8));
        assert_eq!(mosaic_tile_size(10, 30, 0.6, 64, 64, 32, 15), (8, 15));
    }
}
