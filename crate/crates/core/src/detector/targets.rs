//! Training targets for the proposal stage and the RoI head, and the standard
//! detection losses with their gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::boxes::Corners;
use crate::detector::model::{sigmoid, RpnOutput, HEAD_CODER, RPN_CODER};
use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub rpn_positive_iou: f32,
    pub rpn_negative_iou: f32,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f32,
    pub roi_foreground_iou: f32,
    pub roi_batch: usize,
    pub roi_foreground_fraction: f32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_positive_iou: 0.6,
            rpn_negative_iou: 0.3,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            roi_foreground_iou: 0.5,
            roi_batch: 48,
            roi_foreground_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSample {
    pub anchor: usize,
    pub positive: bool,
    /// Regression target for positives.
    pub target: Option<[f32; 4]>,
}

/// Labels anchors by IoU with the ground truth (each box also claims its best
/// anchor) and subsamples a balanced minibatch.
pub fn assign_anchors(
    anchors: &[Corners],
    gts: &[BoundingBox],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Vec<AnchorSample> {
    let gt_corners: Vec<Corners> = gts.iter().map(Corners::from_box).collect();
    let mut best = vec![(0.0f32, usize::MAX); anchors.len()];
    let mut gt_best = vec![(0.0f32, usize::MAX); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gt_corners.iter().enumerate() {
            let o = anchor.iou(gt);
            if o > best[a].0 {
                best[a] = (o, g);
            }
            if o > gt_best[g].0 {
                gt_best[g] = (o, a);
            }
        }
    }
    let mut label: Vec<Option<bool>> = best
        .iter()
        .map(|&(o, _)| {
            if o >= cfg.rpn_positive_iou {
                Some(true)
            } else if o < cfg.rpn_negative_iou {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    for (g, &(o, a)) in gt_best.iter().enumerate() {
        if o > 0.0 {
            label[a] = Some(true);
            best[a] = (o, g);
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&a| label[a] == Some(true)).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&a| label[a] == Some(false)).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.rpn_batch as f32 * cfg.rpn_positive_fraction) as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.rpn_batch - pos.len());
    let mut out: Vec<AnchorSample> = pos
        .iter()
        .map(|&a| AnchorSample {
            anchor: a,
            positive: true,
            target: Some(RPN_CODER.encode(&gt_corners[best[a].1], &anchors[a])),
        })
        .collect();
    out.extend(neg.iter().map(|&a| AnchorSample {
        anchor: a,
        positive: false,
        target: None,
    }));
    out.sort_by_key(|s| s.anchor);
    out
}

/// Smooth-L1 value and derivative.
pub fn smooth_l1(x: f32, beta: f32) -> (f32, f32) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

pub const RPN_SMOOTH_L1_BETA: f32 = 1.0 / 9.0;
pub const HEAD_SMOOTH_L1_BETA: f32 = 1.0;

#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub objectness: f64,
    pub regression: f64,
    pub dobjectness: Vec<f32>,
    pub ddeltas: Vec<f32>,
}

/// Binary cross-entropy on the sampled anchors plus smooth-L1 on the
/// positives, both normalised by the sample count.
pub fn rpn_loss(out: &RpnOutput, cells: usize, samples: &[AnchorSample]) -> RpnLoss {
    let mut dobj = vec![0.0f32; out.objectness.len()];
    let mut ddeltas = vec![0.0f32; out.deltas.len()];
    let mut obj = 0.0f64;
    let mut reg = 0.0f64;
    let n = samples.len().max(1) as f32;
    for s in samples {
        let z = out.objectness[s.anchor];
        let y = if s.positive { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, computed stably
        obj += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) as f64;
        dobj[s.anchor] = (sigmoid(z) - y) / n;
        if let Some(t) = s.target {
            let d = out.anchor_deltas(s.anchor, cells);
            let (k, cell) = (s.anchor / cells, s.anchor % cells);
            for c in 0..4 {
                let (v, g) = smooth_l1(d[c] - t[c], RPN_SMOOTH_L1_BETA);
                reg += v as f64;
                ddeltas[(4 * k + c) * cells + cell] = g / n;
            }
        }
    }
    RpnLoss {
        objectness: obj / n as f64,
        regression: reg / n as f64,
        dobjectness: dobj,
        ddeltas,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub bbox: BoundingBox,
    /// Head column; 0 is background.
    pub label: usize,
    pub target: Option<[f32; 4]>,
}

/// Matches proposals (plus the ground-truth boxes themselves) against labelled
/// boxes and draws a minibatch with a capped foreground share. `gts` pairs
/// each box with its head column.
pub fn sample_rois(
    proposals: &[BoundingBox],
    gts: &[(BoundingBox, usize)],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Vec<RoiSample> {
    let mut candidates: Vec<BoundingBox> = proposals.to_vec();
    candidates.extend(gts.iter().map(|g| g.0));
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in candidates {
        let best = gts
            .iter()
            .map(|(g, l)| (iou(&b, g), g, *l))
            .max_by(|x, y| x.0.total_cmp(&y.0));
        match best {
            Some((o, g, l)) if o >= cfg.roi_foreground_iou => fg.push(RoiSample {
                bbox: b,
                label: l,
                target: Some(HEAD_CODER.encode(&Corners::from_box(g), &Corners::from_box(&b))),
            }),
            _ => bg.push(RoiSample {
                bbox: b,
                label: 0,
                target: None,
            }),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = ((cfg.roi_batch as f32 * cfg.roi_foreground_fraction).round() as usize).max(1);
    fg.truncate(max_fg);
    bg.truncate(cfg.roi_batch.saturating_sub(fg.len()));
    fg.extend(bg);
    fg
}

/// Class-specific smooth-L1 on foreground samples, normalised by the number
/// of samples. `deltas` is `P x 4K`.
pub fn head_box_loss(deltas: &[f32], num_classes: usize, samples: &[RoiSample]) -> (f64, Vec<f32>) {
    let mut grad = vec![0.0f32; deltas.len()];
    let n = samples.len().max(1) as f32;
    let mut loss = 0.0f64;
    for (r, s) in samples.iter().enumerate() {
        let Some(t) = s.target else { continue };
        let base = r * 4 * num_classes + 4 * (s.label - 1);
        for c in 0..4 {
            let (v, g) = smooth_l1(deltas[base + c] - t[c], HEAD_SMOOTH_L1_BETA);
            loss += v as f64;
            grad[base + c] = g / n;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::generate_anchors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_gt_claims_an_anchor() {
        let anchors = generate_anchors(8, 8, 8, &[20.0], &[0.5, 1.0, 2.0]);
        let gts = [
            BoundingBox::new(3.0, 3.0, 12.0, 12.0).unwrap(),
            BoundingBox::new(40.0, 30.0, 22.0, 22.0).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = assign_anchors(&anchors, &gts, &SamplingConfig::default(), &mut rng);
        assert!(s.len() <= 64);
        let pos: Vec<_> = s.iter().filter(|x| x.positive).collect();
        assert!(pos.len() >= 2);
        for p in pos {
            let t = p.target.unwrap();
            let back = RPN_CODER.decode(&t, &anchors[p.anchor]);
            let hit = gts.iter().any(|g| back.iou(&Corners::from_box(g)) > 0.999);
            assert!(hit);
        }
    }

    #[test]
    fn roi_sampling_caps_foreground() {
        let gt = BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let props: Vec<_> = (0..40)
            .map(|i| BoundingBox::new(10.0 + (i % 3) as f32, 10.0, 20.0, 20.0).unwrap())
            .chain((0..40).map(|i| BoundingBox::new(i as f32, 40.0, 10.0, 10.0).unwrap()))
            .collect();
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_rois(&props, &[(gt, 3)], &cfg, &mut rng);
        assert_eq!(s.len(), cfg.roi_batch);
        assert_eq!(s.iter().filter(|x| x.label == 3).count(), 12);
        assert!(s.iter().all(|x| (x.label == 0) == x.target.is_none()));
    }

    #[test]
    fn smooth_l1_is_continuous() {
        let b = 0.5;
        let (l, _) = smooth_l1(b - 1e-6, b);
        let (r, _) = smooth_l1(b + 1e-6, b);
        assert!((l - r).abs() < 1e-5);
        assert_eq!(smooth_l1(-2.0, b).1, -1.0);
    }
}
