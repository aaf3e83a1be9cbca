//! Desk-scale two-stage detector: a small convolutional backbone, a dense
//! anchor proposal stage and a RoI classification/regression head whose width
//! grows with every new task.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::boxes::{generate_anchors, nms, BoxCoder, Corners};
use crate::detector::features::{roi_align, roi_pool, FeatureMap, FeatureTensor};
use crate::detector::nn::{normal_init, relu_backward, relu_inplace, Conv2d, ConvCache, Linear};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ClassId, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// `(out_channels, stride)` of each 3x3 conv block.
    pub backbone: Vec<(usize, usize)>,
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f32>,
    /// Height/width ratios.
    pub anchor_ratios: Vec<f32>,
    pub pre_nms_top_n: usize,
    /// Proposals kept after NMS (top-K).
    pub post_nms_top_n: usize,
    pub rpn_nms_iou: f32,
    pub min_proposal_size: f32,
    /// RoI pooling output size S.
    pub pool_size: usize,
    pub hidden: usize,
    pub score_threshold: f32,
    pub detection_nms_iou: f32,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: vec![(16, 2), (32, 2), (32, 1), (32, 2), (32, 1)],
            rpn_channels: 32,
            anchor_sizes: vec![20.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pre_nms_top_n: 300,
            post_nms_top_n: 64,
            rpn_nms_iou: 0.7,
            min_proposal_size: 2.0,
            pool_size: 7,
            hidden: 128,
            score_threshold: 0.05,
            detection_nms_iou: 0.5,
            max_detections: 30,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|&(_, s)| s).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(3, |&(c, _)| c)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }
}

/// Bias given to freshly added class rows so that new classes start with low
/// probability.
pub const NEW_CLASS_BIAS: f32 = -4.0;
pub const NEW_CLASS_WEIGHT_STD: f32 = 0.01;
pub const NEW_REG_WEIGHT_STD: f32 = 0.001;

pub const RPN_CODER: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0] };
pub const HEAD_CODER: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] };

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub config: DetectorConfig,
    pub backbone: Vec<Conv2d>,
    pub rpn_conv: Conv2d,
    pub rpn_cls: Conv2d,
    pub rpn_reg: Conv2d,
    pub fc: Linear,
    /// Column 0 is background, column `j` is `classes[j - 1]`.
    pub cls: Linear,
    /// Four class-specific deltas per foreground class.
    pub reg: Linear,
    pub classes: Vec<ClassId>,
}

/// Input padded to the backbone stride; `pad_bottom`/`pad_right` are the zero
/// rows/columns appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadOffset {
    pub pad_bottom: usize,
    pub pad_right: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    layers: Vec<ConvCache>,
    outputs: Vec<Vec<f32>>,
    pub offset: PadOffset,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// Objectness logits, one per anchor.
    pub objectness: Vec<f32>,
    /// Deltas laid out as `4A x H x W`.
    pub deltas: Vec<f32>,
    hidden: Vec<f32>,
    conv_cache: ConvCache,
    cls_cache: ConvCache,
    reg_cache: ConvCache,
}

impl RpnOutput {
    /// Deltas of anchor `a` (in `generate_anchors` order).
    pub fn anchor_deltas(&self, a: usize, cells: usize) -> [f32; 4] {
        let (k, cell) = (a / cells, a % cells);
        std::array::from_fn(|c| self.deltas[(4 * k + c) * cells + cell])
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `P x (K + 1)`
    pub logits: Vec<f32>,
    /// `P x 4K`
    pub deltas: Vec<f32>,
    hidden: Vec<f32>,
    pub num_rois: usize,
}

impl DetectionModel {
    /// Fresh model with an empty head (background only) until classes are added.
    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Self {
        let mut backbone = Vec::with_capacity(config.backbone.len());
        let mut in_c = 3;
        for &(out_c, stride) in &config.backbone {
            backbone.push(Conv2d::he(in_c, out_c, 3, stride, rng));
            in_c = out_c;
        }
        let a = config.anchors_per_cell();
        let rpn_conv = Conv2d::he(in_c, config.rpn_channels, 3, 1, rng);
        let rpn_cls = Conv2d::new(config.rpn_channels, a, 1, 1, 0, 0.01, rng);
        let rpn_reg = Conv2d::new(config.rpn_channels, 4 * a, 1, 1, 0, 0.01, rng);
        let pooled = in_c * config.pool_size * config.pool_size;
        let fc = Linear::new(pooled, config.hidden, (2.0 / pooled as f32).sqrt(), rng);
        let cls = Linear::new(config.hidden, 1, 0.01, rng);
        let reg = Linear::new(config.hidden, 0, 0.001, rng);
        Self {
            config,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            fc,
            cls,
            reg,
            classes: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Head output width: seen classes plus background.
    pub fn head_width(&self) -> usize {
        self.cls.out_features
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }

    /// Appends rows for `new_classes`. Existing rows are untouched, so
    /// old-class logits are bit-identical before any training.
    pub fn grow_head(&mut self, new_classes: &[ClassId], rng: &mut impl Rng) {
        for &c in new_classes {
            let w = normal_init(self.config.hidden, NEW_CLASS_WEIGHT_STD, rng);
            self.cls.append_rows(&w, &[NEW_CLASS_BIAS]);
            let rw = normal_init(4 * self.config.hidden, NEW_REG_WEIGHT_STD, rng);
            self.reg.append_rows(&rw, &[0.0; 4]);
            self.classes.push(c);
        }
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for c in &self.backbone {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for c in [&self.rpn_conv, &self.rpn_cls, &self.rpn_reg] {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for l in [&self.fc, &self.cls, &self.reg] {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.backbone {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in [&mut self.rpn_conv, &mut self.rpn_cls, &mut self.rpn_reg] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in [&mut self.fc, &mut self.cls, &mut self.reg] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Number of parameter tensors that belong to the backbone.
    pub fn backbone_param_tensors(&self) -> usize {
        2 * self.backbone.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// FNV-1a over the parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Image to centred CHW input, zero-padded to a multiple of the stride.
    fn prepare_input(&self, img: &Image) -> (Vec<f32>, usize, usize, PadOffset) {
        let s = self.config.stride();
        let (h, w) = (img.height(), img.width());
        let ph = h.div_ceil(s) * s;
        let pw = w.div_ceil(s) * s;
        let mut x = vec![0.0f32; 3 * ph * pw];
        let data = img.data();
        for y in 0..h {
            for xx in 0..w {
                let i = (y * w + xx) * 3;
                for c in 0..3 {
                    x[(c * ph + y) * pw + xx] = data[i + c] - 0.5;
                }
            }
        }
        (
            x,
            ph,
            pw,
            PadOffset {
                pad_bottom: ph - h,
                pad_right: pw - w,
            },
        )
    }

    pub fn backbone_forward(&self, img: &Image) -> (FeatureTensor, BackboneCache) {
        let (mut x, mut h, mut w, offset) = self.prepare_input(img);
        let mut layers = Vec::with_capacity(self.backbone.len());
        let mut outputs = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let (mut y, cache) = conv.forward(&x, h, w);
            relu_inplace(&mut y);
            (h, w) = conv.output_size(h, w);
            layers.push(cache);
            outputs.push(y.clone());
            x = y;
        }
        let features = FeatureTensor {
            channels: self.config.feature_channels(),
            height: h,
            width: w,
            stride: self.config.stride(),
            values: x,
        };
        let cache = BackboneCache {
            layers,
            outputs,
            offset,
            image_height: img.height(),
            image_width: img.width(),
        };
        (features, cache)
    }

    pub fn backbone_backward(&self, cache: &BackboneCache, dfeatures: Vec<f32>, grad: &mut DetectionModel) {
        let mut dy = dfeatures;
        for (i, conv) in self.backbone.iter().enumerate().rev() {
            relu_backward(&cache.outputs[i], &mut dy);
            match conv.backward(&cache.layers[i], &dy, &mut grad.backbone[i], i > 0) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }

    pub fn rpn_forward(&self, f: &FeatureTensor) -> RpnOutput {
        let (mut hidden, conv_cache) = self.rpn_conv.forward(&f.values, f.height, f.width);
        relu_inplace(&mut hidden);
        let (objectness, cls_cache) = self.rpn_cls.forward(&hidden, f.height, f.width);
        let (deltas, reg_cache) = self.rpn_reg.forward(&hidden, f.height, f.width);
        RpnOutput {
            objectness,
            deltas,
            hidden,
            conv_cache,
            cls_cache,
            reg_cache,
        }
    }

    /// Backpropagates RPN output gradients; accumulates into `dfeatures`.
    pub fn rpn_backward(
        &self,
        out: &RpnOutput,
        dobj: &[f32],
        ddeltas: &[f32],
        grad: &mut DetectionModel,
        dfeatures: &mut [f32],
    ) {
        let mut dh = self
            .rpn_cls
            .backward(&out.cls_cache, dobj, &mut grad.rpn_cls, true)
            .expect("dx requested");
        let dh2 = self
            .rpn_reg
            .backward(&out.reg_cache, ddeltas, &mut grad.rpn_reg, true)
            .expect("dx requested");
        for (a, b) in dh.iter_mut().zip(&dh2) {
            *a += b;
        }
        relu_backward(&out.hidden, &mut dh);
        let dx = self
            .rpn_conv
            .backward(&out.conv_cache, &dh, &mut grad.rpn_conv, true)
            .expect("dx requested");
        for (a, b) in dfeatures.iter_mut().zip(&dx) {
            *a += b;
        }
    }

    pub fn anchors(&self, f: &FeatureTensor) -> Vec<Corners> {
        generate_anchors(
            f.height,
            f.width,
            f.stride,
            &self.config.anchor_sizes,
            &self.config.anchor_ratios,
        )
    }

    /// Decodes, clips and suppresses anchor predictions into at most
    /// `post_nms_top_n` proposals sorted by descending objectness.
    pub fn propose(&self, f: &FeatureTensor, rpn: &RpnOutput, image_height: usize, image_width: usize) -> Vec<Proposal> {
        let anchors = self.anchors(f);
        let cells = f.height * f.width;
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| rpn.objectness[b].total_cmp(&rpn.objectness[a]).then(a.cmp(&b)));
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &a in order.iter().take(self.config.pre_nms_top_n) {
            let decoded = RPN_CODER.decode(&rpn.anchor_deltas(a, cells), &anchors[a]);
            let Some(b) = decoded.clip(image_width, image_height) else {
                continue;
            };
            if b.w() < self.config.min_proposal_size || b.h() < self.config.min_proposal_size {
                continue;
            }
            boxes.push(b);
            scores.push(sigmoid(rpn.objectness[a]));
        }
        nms(&boxes, &scores, self.config.rpn_nms_iou)
            .into_iter()
            .take(self.config.post_nms_top_n)
            .map(|i| Proposal {
                bbox: boxes[i],
                objectness: scores[i],
            })
            .collect()
    }

    /// Shared features and proposals for an image.
    pub fn forward(&self, img: &Image) -> (FeatureTensor, Vec<Proposal>, PadOffset) {
        let (f, cache) = self.backbone_forward(img);
        let rpn = self.rpn_forward(&f);
        let proposals = self.propose(&f, &rpn, img.height(), img.width());
        (f, proposals, cache.offset)
    }

    pub fn pool(&self, f: &FeatureTensor, rois: &[BoundingBox]) -> Vec<f32> {
        roi_align(f, rois, self.config.pool_size)
    }

    pub fn roi_features(&self, f: &FeatureTensor, rois: &[BoundingBox]) -> Vec<FeatureMap> {
        roi_pool(f, rois, self.config.pool_size)
    }

    pub fn head_forward(&self, pooled: &[f32], num_rois: usize) -> HeadOutput {
        let mut hidden = self.fc.forward(pooled, num_rois);
        relu_inplace(&mut hidden);
        let logits = self.cls.forward(&hidden, num_rois);
        let deltas = self.reg.forward(&hidden, num_rois);
        HeadOutput {
            logits,
            deltas,
            hidden,
            num_rois,
        }
    }

    /// Returns `dL/dpooled`.
    pub fn head_backward(
        &self,
        pooled: &[f32],
        out: &HeadOutput,
        dlogits: &[f32],
        ddeltas: &[f32],
        grad: &mut DetectionModel,
    ) -> Vec<f32> {
        let n = out.num_rois;
        let mut dh = self
            .cls
            .backward(&out.hidden, dlogits, n, &mut grad.cls, true)
            .expect("dx requested");
        if self.reg.out_features > 0 {
            let dh2 = self
                .reg
                .backward(&out.hidden, ddeltas, n, &mut grad.reg, true)
                .expect("dx requested");
            for (a, b) in dh.iter_mut().zip(&dh2) {
                *a += b;
            }
        }
        relu_backward(&out.hidden, &mut dh);
        self.fc
            .backward(pooled, &dh, n, &mut grad.fc, true)
            .expect("dx requested")
    }

    /// Class probabilities (softmax over the head) for the given boxes.
    pub fn classify(&self, f: &FeatureTensor, rois: &[BoundingBox]) -> Vec<Vec<f64>> {
        let pooled = self.pool(f, rois);
        let out = self.head_forward(&pooled, rois.len());
        out.logits
            .chunks(self.head_width())
            .map(softmax_f64)
            .collect()
    }

    /// Full inference: per-class decoding, score filtering and NMS.
    pub fn detect(&self, img: &Image) -> Vec<Detection> {
        let (f, proposals, _) = self.forward(img);
        if proposals.is_empty() || self.classes.is_empty() {
            return Vec::new();
        }
        let rois: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = self.pool(&f, &rois);
        let out = self.head_forward(&pooled, rois.len());
        let width = self.head_width();
        let k = self.num_classes();
        let mut dets = Vec::new();
        for j in 1..=k {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (r, roi) in rois.iter().enumerate() {
                let probs = softmax_f64(&out.logits[r * width..(r + 1) * width]);
                let score = probs[j] as f32;
                if score < self.config.score_threshold {
                    continue;
                }
                let d = &out.deltas[r * 4 * k + 4 * (j - 1)..][..4];
                let Some(b) = HEAD_CODER.decode(d, &Corners::from_box(roi)).clip(img.width(), img.height()) else {
                    continue;
                };
                boxes.push(b);
                scores.push(score);
            }
            for i in nms(&boxes, &scores, self.config.detection_nms_iou) {
                dets.push(Detection {
                    bbox: boxes[i],
                    class_id: self.classes[j - 1],
                    score: scores[i],
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(self.config.max_detections);
        dets
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub const CHECKPOINT_FORMAT: &str = "abr-checkpoint/1";

/// Serialized model plus its position in the task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub task: usize,
    pub step: u64,
    pub seen_classes: Vec<ClassId>,
    pub task_classes: Vec<Vec<ClassId>>,
    pub head_width: usize,
    pub model: DetectionModel,
}

impl Checkpoint {
    pub fn new(model: DetectionModel, task: usize, step: u64, task_classes: Vec<Vec<ClassId>>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            task,
            step,
            seen_classes: model.classes.clone(),
            task_classes,
            head_width: model.head_width(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                found: ck.format,
                expected: CHECKPOINT_FORMAT.into(),
            });
        }
        if ck.head_width != ck.model.head_width() || ck.seen_classes != ck.model.classes {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "header disagrees with model head".into(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(classes: u32) -> DetectionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = DetectionModel::new(DetectorConfig::default(), &mut rng);
        let ids: Vec<ClassId> = (1..=classes).map(ClassId).collect();
        m.grow_head(&ids, &mut rng);
        m
    }

    fn test_image() -> Image {
        Image::from_fn(64, 64, |y, x| {
            let v = ((x * 7 + y * 3) % 17) as f32 / 17.0;
            [v, 1.0 - v, 0.3]
        })
    }

    #[test]
    fn blank_image_gives_uniform_probabilities() {
        let mut m = model(3);
        m.cls.bias.fill(0.0);
        let img = Image::filled(64, 64, 0.5); // centred input is all zeros
        let (f, proposals, _) = m.forward(&img);
        assert!(!proposals.is_empty());
        let rois: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
        for p in m.classify(&f, &rois) {
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn forward_is_deterministic_and_truncated() {
        let mut m = model(2);
        m.config.post_nms_top_n = 5;
        let img = test_image();
        let (f1, p1, _) = m.forward(&img);
        let (f2, p2, _) = m.forward(&img);
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
        assert!(p1.len() <= 5);
        assert!(p1.windows(2).all(|w| w[0].objectness >= w[1].objectness));
    }

    #[test]
    fn non_divisible_input_is_padded() {
        let m = model(1);
        let img = Image::filled(61, 59, 0.2);
        let (f, _, off) = m.forward(&img);
        assert_eq!(off, PadOffset { pad_bottom: 3, pad_right: 5 });
        assert_eq!((f.height, f.width), (8, 8));
    }

    #[test]
    fn grow_head_preserves_old_logits() {
        let m = model(3);
        let img = test_image();
        let (f, proposals, _) = m.forward(&img);
        let rois: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = m.pool(&f, &rois);
        let before = m.head_forward(&pooled, rois.len());

        let mut grown = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        grown.grow_head(&[ClassId(4), ClassId(5)], &mut rng);
        assert_eq!(grown.head_width(), 6);
        let after = grown.head_forward(&pooled, rois.len());
        for r in 0..rois.len() {
            assert_eq!(before.logits[r * 4..r * 4 + 4], after.logits[r * 6..r * 6 + 4]);
            assert_eq!(before.deltas[r * 12..r * 12 + 12], after.deltas[r * 20..r * 20 + 12]);
        }

        // new rows follow the documented initialiser under the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for c in 0..2 {
            let w = normal_init(m.config.hidden, NEW_CLASS_WEIGHT_STD, &mut rng);
            let _ = normal_init(4 * m.config.hidden, NEW_REG_WEIGHT_STD, &mut rng);
            let row = 4 + c;
            assert_eq!(&grown.cls.weight[row * 128..(row + 1) * 128], &w[..]);
            assert_eq!(grown.cls.bias[row], NEW_CLASS_BIAS);
        }

        let mut same = m.clone();
        same.grow_head(&[], &mut rng);
        assert_eq!(same, m);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::new(m.clone(), 1, 10, vec![vec![ClassId(1), ClassId(2)]]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.model.checksum(), m.checksum());

        let mut bad = ck;
        bad.format = "other/9".into();
        bad.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn backbone_gradient_matches_finite_difference() {
        let m = model(1);
        let img = test_image();
        let (f, cache) = m.backbone_forward(&img);
        let r: Vec<f32> = (0..f.values.len()).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect();
        let mut g = m.zeros_like();
        m.backbone_backward(&cache, r.clone(), &mut g);
        let loss = |m: &DetectionModel| -> f64 {
            let (f, _) = m.backbone_forward(&img);
            f.values.iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for (layer, idx, eps) in [(4usize, 0usize, 1e-2f32), (4, 300, 1e-2), (3, 10, 1e-2), (2, 10, 1e-2), (2, 500, 1e-2), (1, 7, 1e-2), (1, 100, 1e-2)] {
            let mut mp = m.clone();
            mp.backbone[layer].weight[idx] += eps;
            let mut mm = m.clone();
            mm.backbone[layer].weight[idx] -= eps;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * eps as f64);
            let an = g.backbone[layer].weight[idx] as f64;
            assert!((fd - an).abs() < 5e-3, "layer {layer} [{idx}]: {fd} vs {an}");
        }
    }
}
