//! Task-sequence training: composed replay samples, the frozen teacher, the
//! buffer update after each task, evaluation and run artifacts.

pub mod config;
mod run;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{compose, ComposedSample, ReplayConfig};
use crate::buffer::{select_prototype_boxes, BoxBuffer, SelectionOptions};
use crate::data::{DatasetManifest, ImageSource, ProtocolPlan, TaskData};
use crate::detector::features::{roi_align_backward, to_feature_maps};
use crate::detector::model::softmax_f64;
use crate::detector::targets::{assign_anchors, head_box_loss, rpn_loss, sample_rois};
use crate::detector::DetectionModel;
use crate::error::{Error, Result};
use crate::eval::{map_report, ClassGroups, DetectionResult, EvalReport, GroundTruth};
use crate::geometry::{Annotation, BoundingBox, ClassId, Image};
use crate::losses::{
    afd_loss, ard_loss_grad, cross_entropy_with_grad, inclusive_classification_with_grad,
    inclusive_distillation_with_grad, pad_loss, total_loss, ClassPartition, LossRecord, ProposalPairBatch,
};
use crate::rng::stream;

pub use config::TrainConfig;
pub use run::{latest_record, load_data, load_plan, run_protocol, ProtocolData, SplitData, TaskRunRecord};

/// SGD with momentum and L2 weight decay; velocities are reset whenever the
/// parameter shapes change (head growth).
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Vec::new(),
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
        }
    }

    /// `v = momentum * v + (scale * g + wd * w)`, `w -= lr * v`.
    pub fn step(&mut self, model: &mut DetectionModel, grad: &DetectionModel, lr: f32, scale: f32) {
        let grads = grad.params();
        let mut params = model.params_mut();
        let fresh = self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.len());
        if fresh {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + scale * gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

fn grad_norm(grad: &DetectionModel) -> f64 {
    grad.params()
        .iter()
        .flat_map(|p| p.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Loss components of one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ImageLosses {
    pub det: f64,
    pub ic: f64,
    pub id: f64,
    pub afd: f64,
    pub pad: f64,
    pub total: f64,
}

impl ImageLosses {
    fn add(&mut self, o: &ImageLosses) {
        self.det += o.det;
        self.ic += o.ic;
        self.id += o.id;
        self.afd += o.afd;
        self.pad += o.pad;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.det, &mut self.ic, &mut self.id, &mut self.afd, &mut self.pad, &mut self.total] {
            *v *= s;
        }
        self
    }
}

/// Forward and backward pass for one (composed) image, accumulating into
/// `grad`. The teacher only runs inference on the same pixels, and its
/// features are pooled at the student's sampled RoIs.
pub fn accumulate_image(
    model: &DetectionModel,
    teacher: Option<&DetectionModel>,
    pixels: &Image,
    annotations: &[Annotation],
    config: &TrainConfig,
    rng: &mut impl Rng,
    grad: &mut DetectionModel,
) -> Result<ImageLosses> {
    let weights = config.loss.weights();
    let num_old = teacher.map_or(0, |t| t.num_classes());
    let part = ClassPartition {
        old: num_old,
        new: model.num_classes() - num_old,
    };

    let (f, bcache) = model.backbone_forward(pixels);
    let rpn = model.rpn_forward(&f);
    let anchors = model.anchors(&f);
    let cells = f.height * f.width;
    let gts: Vec<BoundingBox> = annotations.iter().map(|a| a.bbox).collect();
    let anchor_samples = assign_anchors(&anchors, &gts, &config.sampling, rng);
    let rl = rpn_loss(&rpn, cells, &anchor_samples);

    let proposals: Vec<BoundingBox> = model
        .propose(&f, &rpn, pixels.height(), pixels.width())
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let labelled = annotations
        .iter()
        .map(|a| {
            model
                .column_of(a.class_id)
                .map(|c| (a.bbox, c))
                .ok_or_else(|| Error::UnknownClass(format!("class {} has no head column", a.class_id.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    let rois = sample_rois(&proposals, &labelled, &config.sampling, rng);
    let roi_boxes: Vec<BoundingBox> = rois.iter().map(|r| r.bbox).collect();
    let labels: Vec<usize> = rois.iter().map(|r| r.label).collect();
    let n = rois.len();

    let pooled = model.pool(&f, &roi_boxes);
    let head = model.head_forward(&pooled, n);
    let width = model.head_width();
    let logits: Vec<Vec<f64>> = head
        .logits
        .chunks(width)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let (ic, mut dlogits) = if config.loss.inclusive {
        inclusive_classification_with_grad(&logits, &labels, part)?
    } else {
        cross_entropy_with_grad(&logits, &labels)?
    };
    let (head_box, dbox) = head_box_loss(&head.deltas, model.num_classes(), &rois);

    let mut out = ImageLosses {
        ic,
        det: rl.objectness + rl.regression + ic + head_box,
        ..ImageLosses::default()
    };
    let mut dpooled_ard: Option<Vec<f32>> = None;
    if let Some(t) = teacher.filter(|_| part.old > 0 && (weights.alpha > 0.0 || weights.beta > 0.0)) {
        let (tf, _) = t.backbone_forward(pixels);
        let tpooled = t.pool(&tf, &roi_boxes);
        if weights.alpha > 0.0 {
            let th = t.head_forward(&tpooled, n);
            let tprobs: Vec<Vec<f64>> = th.logits.chunks(t.head_width()).map(softmax_f64).collect();
            let (id, g) = inclusive_distillation_with_grad(&tprobs, &logits, &labels, part)?;
            out.id = id;
            for (row, grow) in dlogits.iter_mut().zip(g) {
                for (a, b) in row.iter_mut().zip(grow) {
                    *a += weights.alpha * b;
                }
            }
        }
        if weights.beta > 0.0 {
            let (c, s) = (f.channels, model.config.pool_size);
            let batch = ProposalPairBatch::new(
                roi_boxes.clone(),
                to_feature_maps(&pooled, c, s),
                to_feature_maps(&tpooled, c, s),
                config.loss.power,
            )?;
            out.afd = afd_loss(&batch);
            out.pad = pad_loss(&batch);
            let g = ard_loss_grad(&batch, weights.gamma);
            dpooled_ard = Some(g.into_iter().flatten().map(|v| (weights.beta * v) as f32).collect());
        }
    }
    out.total = total_loss(out.det, out.id, out.afd + weights.gamma * out.pad, &weights);

    let dlogits_flat: Vec<f32> = dlogits.into_iter().flatten().map(|v| v as f32).collect();
    let mut dpooled = model.head_backward(&pooled, &head, &dlogits_flat, &dbox, grad);
    if let Some(extra) = dpooled_ard {
        for (a, b) in dpooled.iter_mut().zip(extra) {
            *a += b;
        }
    }
    let mut dfeatures = vec![0.0f32; f.values.len()];
    roi_align_backward(&f, &roi_boxes, model.config.pool_size, &dpooled, &mut dfeatures);
    model.rpn_backward(&rpn, &rl.dobjectness, &rl.ddeltas, grad, &mut dfeatures);
    model.backbone_backward(&bcache, dfeatures, grad);
    Ok(out)
}

/// The sample sequence training sees for one task: shuffled passes over the
/// task's images, each composed with replay from `buffer`. Draws from the
/// `order` and `replay` streams of the task.
pub struct SampleStream<'a, S: ?Sized> {
    task: &'a TaskData,
    images: &'a S,
    buffer: &'a BoxBuffer,
    replay: ReplayConfig,
    order_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a, S: ImageSource + ?Sized> SampleStream<'a, S> {
    pub fn new(task: &'a TaskData, images: &'a S, buffer: &'a BoxBuffer, config: &TrainConfig) -> Self {
        let (seed, t) = (config.train.seed, task.spec.index as u64);
        Self {
            task,
            images,
            buffer,
            replay: config.replay.to_replay_config(),
            order_rng: stream(seed, "order", t),
            replay_rng: stream(seed, "replay", t),
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Next composed sample with the manifest index of its source image.
    pub fn next_sample(&mut self) -> Result<(usize, ComposedSample)> {
        if self.task.is_empty() {
            return Err(Error::Empty(format!("task {} has no training images", self.task.spec.index)));
        }
        if self.cursor == self.order.len() {
            self.order = (0..self.task.len()).collect();
            self.order.shuffle(&mut self.order_rng);
            self.cursor = 0;
        }
        let sample = &self.task.samples[self.order[self.cursor]];
        self.cursor += 1;
        let image = self.images.image(sample.entry)?;
        let composed = compose(&image, &sample.annotations, self.buffer, &self.replay, &mut self.replay_rng)?;
        Ok((sample.entry, composed))
    }
}

/// Trains `model` on one task. `task_index` is 1-based and selects the
/// learning rate, iteration count and random streams.
#[allow(clippy::too_many_arguments)]
pub fn train_task<S: ImageSource + ?Sized>(
    model: &mut DetectionModel,
    teacher: Option<&DetectionModel>,
    task: &TaskData,
    images: &S,
    buffer: &BoxBuffer,
    config: &TrainConfig,
    first_step: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if task.is_empty() {
        return Err(Error::Empty(format!("task {} has no training images", task.spec.index)));
    }
    let t = task.spec.index;
    if t > 1 && teacher.is_none() {
        return Err(Error::invalid(format!("task {t} needs a teacher model")));
    }
    if t > 1 && buffer.is_empty() && (config.replay.mixup || config.replay.mosaic) && config.buffer.capacity > 0 {
        log::warn!("task {t}: buffer is empty, replay falls back to plain images");
    }
    let (iterations, lr) = if t == 1 {
        (config.train.iterations_initial, config.train.lr_initial)
    } else {
        (config.train.iterations, config.train.lr)
    };
    let mut samples = SampleStream::new(task, images, buffer, config);
    let mut sample_rng = stream(config.train.seed, "sampling", t as u64);
    let mut sgd = Sgd::new(config.train.momentum, config.train.weight_decay);
    let batch = config.train.batch_size;
    let mut records = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut grad = model.zeros_like();
        let mut sum = ImageLosses::default();
        for _ in 0..batch {
            let (_, composed) = samples.next_sample()?;
            let l = accumulate_image(
                model,
                teacher,
                &composed.pixels,
                &composed.annotations,
                config,
                &mut sample_rng,
                &mut grad,
            )?;
            sum.add(&l);
        }
        let mut scale = 1.0 / batch as f32;
        if config.train.clip_norm > 0.0 {
            let norm = grad_norm(&grad) * scale as f64;
            if norm > config.train.clip_norm {
                scale *= (config.train.clip_norm / norm) as f32;
            }
        }
        sgd.step(model, &grad, lr as f32, scale);
        let mean = sum.scaled(1.0 / batch as f64);
        let rec = LossRecord {
            step: first_step + it as u64 + 1,
            task: t,
            det: mean.det,
            ic: mean.ic,
            id: mean.id,
            afd: mean.afd,
            pad: mean.pad,
            total: mean.total,
        };
        if !rec.total.is_finite() {
            return Err(Error::invalid(format!("task {t} step {}: loss diverged", rec.step)));
        }
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Groundtruth of `manifest` restricted to `classes`, with image ids equal
/// to entry indices.
pub fn groundtruth(manifest: &DatasetManifest, classes: &[ClassId]) -> Vec<GroundTruth> {
    manifest
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.objects.iter().filter(|a| classes.contains(&a.class_id)).map(move |a| GroundTruth {
                image_id: i,
                class_id: a.class_id,
                bbox: a.bbox,
                difficult: a.difficult,
            })
        })
        .collect()
}

pub fn detect_all<S: ImageSource + ?Sized>(
    model: &DetectionModel,
    manifest: &DatasetManifest,
    images: &S,
) -> Result<Vec<DetectionResult>> {
    let mut out = Vec::new();
    for i in 0..manifest.entries.len() {
        let img = images.image(i)?;
        out.extend(model.detect(&img).into_iter().map(|d| DetectionResult {
            image_id: i,
            class_id: d.class_id,
            bbox: d.bbox,
            confidence: d.score,
        }));
    }
    Ok(out)
}

/// Evaluates on every image of `manifest` over the classes in `groups`.
pub fn evaluate<S: ImageSource + ?Sized>(
    model: &DetectionModel,
    manifest: &DatasetManifest,
    images: &S,
    groups: &ClassGroups,
    config: &TrainConfig,
) -> Result<EvalReport> {
    let classes = groups.all();
    let dets: Vec<DetectionResult> = detect_all(model, manifest, images)?
        .into_iter()
        .filter(|d| classes.contains(&d.class_id))
        .collect();
    let gts = groundtruth(manifest, &classes);
    map_report(
        &dets,
        &gts,
        groups,
        &config.eval.thresholds,
        config.eval.interpolation(),
        &config.eval.fp(),
    )
}

/// The evolving state of a class-incremental run.
#[derive(Debug, Clone)]
pub struct IncrementalLearner {
    pub config: TrainConfig,
    pub plan: ProtocolPlan,
    pub model: DetectionModel,
    pub buffer: BoxBuffer,
    /// Tasks finished so far.
    pub completed: usize,
    pub step: u64,
}

/// What one task produced.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: usize,
    pub losses: Vec<LossRecord>,
    pub teacher_checksum: Option<u64>,
    pub seconds: f64,
}

impl IncrementalLearner {
    pub fn new(config: TrainConfig, plan: ProtocolPlan) -> Self {
        let mut rng = stream(config.train.seed, "init", 0);
        let model = DetectionModel::new(config.model.clone(), &mut rng);
        let buffer = BoxBuffer::new(config.buffer.capacity);
        Self {
            config,
            plan,
            model,
            buffer,
            completed: 0,
            step: 0,
        }
    }

    pub fn next_task(&self) -> usize {
        self.completed + 1
    }

    /// Grows the head, freezes a teacher copy, trains, then refreshes the
    /// buffer with the just-trained model.
    pub fn learn_task<S: ImageSource + ?Sized>(
        &mut self,
        task: &TaskData,
        images: &S,
        on_step: impl FnMut(&LossRecord),
    ) -> Result<TaskOutcome> {
        let t = self.next_task();
        if task.spec.index != t {
            return Err(Error::invalid(format!("expected task {t}, got task {}", task.spec.index)));
        }
        let start = Instant::now();
        let teacher = (t > 1).then(|| self.model.clone());
        let teacher_checksum = teacher.as_ref().map(DetectionModel::checksum);
        let mut head_rng = stream(self.config.train.seed, "head", t as u64);
        self.model.grow_head(&task.spec.classes, &mut head_rng);
        let losses = train_task(
            &mut self.model,
            teacher.as_ref(),
            task,
            images,
            &self.buffer,
            &self.config,
            self.step,
            on_step,
        )?;
        if let (Some(t), Some(sum)) = (&teacher, teacher_checksum) {
            debug_assert_eq!(t.checksum(), sum);
        }
        self.step += losses.len() as u64;
        self.update_buffer(task, images)?;
        self.completed = t;
        Ok(TaskOutcome {
            task: t,
            losses,
            teacher_checksum,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Recomputes the buffer after the last finished task, for example
    /// after changing `config.buffer.capacity` on a branched learner.
    pub fn update_buffer<S: ImageSource + ?Sized>(&mut self, task: &TaskData, images: &S) -> Result<()> {
        let seen = self.plan.seen_classes(task.spec.index);
        let previous = if self.buffer.capacity == self.config.buffer.capacity {
            self.buffer.clone()
        } else {
            BoxBuffer::new(self.config.buffer.capacity)
        };
        self.buffer = select_prototype_boxes(
            task,
            images,
            &self.model,
            &previous,
            &seen,
            SelectionOptions {
                strategy: self.config.buffer.strategy,
                seed: stream(self.config.train.seed, "buffer", task.spec.index as u64).random(),
            },
        )?;
        Ok(())
    }

    /// Old/new groups after task `t`.
    pub fn groups(&self, t: usize) -> ClassGroups {
        ClassGroups {
            old: self.plan.old_classes(t),
            new: self.plan.task(t).map(|s| s.classes.clone()).unwrap_or_default(),
        }
    }
}
