//! Training objective: attentive RoI distillation, inclusive classification
//! and inclusive distillation, all in `f64` with analytic gradients.
//!
//! Head probability rows are laid out as `[background, old classes..., new
//! classes...]`, described by a [`ClassPartition`].

use serde::{Deserialize, Serialize};

use crate::detector::features::{attention_map, AttentionMap, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: name.into(),
                    message: format!("must be a finite value >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Student/teacher features pooled at the same proposal boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalPairBatch {
    pub boxes: Vec<BoundingBox>,
    pub student: Vec<FeatureMap>,
    pub teacher: Vec<FeatureMap>,
    pub student_attention: Vec<AttentionMap>,
    pub teacher_attention: Vec<AttentionMap>,
    pub power: f64,
}

impl ProposalPairBatch {
    pub fn new(boxes: Vec<BoundingBox>, student: Vec<FeatureMap>, teacher: Vec<FeatureMap>, power: f64) -> Result<Self> {
        if student.len() != teacher.len() || boxes.len() != student.len() {
            return Err(Error::Shape(format!(
                "{} boxes, {} student maps, {} teacher maps",
                boxes.len(),
                student.len(),
                teacher.len()
            )));
        }
        if let Some((s, t)) = student.iter().zip(&teacher).find(|(s, t)| !s.same_shape(t)) {
            return Err(Error::Shape(format!(
                "student {}x{}x{} vs teacher {}x{}x{}",
                s.channels(), s.size(), s.size(), t.channels(), t.size(), t.size()
            )));
        }
        let student_attention = student.iter().map(|f| attention_map(f, power)).collect::<Result<_>>()?;
        let teacher_attention = teacher.iter().map(|f| attention_map(f, power)).collect::<Result<_>>()?;
        Ok(Self {
            boxes,
            student,
            teacher,
            student_attention,
            teacher_attention,
            power,
        })
    }

    pub fn len(&self) -> usize {
        self.student.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student.is_empty()
    }
}

/// Mean Frobenius distance between teacher and student attention maps.
pub fn pad_loss(batch: &ProposalPairBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .teacher_attention
        .iter()
        .zip(&batch.student_attention)
        .map(|(t, s)| frobenius_distance(t.values(), s.values()))
        .sum();
    total / batch.len() as f64
}

fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gradient of [`pad_loss`] with respect to the student attention maps.
/// Where a pair is identical the norm is not differentiable; its gradient is
/// taken as zero.
pub fn pad_loss_grad_attention(batch: &ProposalPairBatch) -> Vec<Vec<f64>> {
    let n = batch.len() as f64;
    batch
        .teacher_attention
        .iter()
        .zip(&batch.student_attention)
        .map(|(t, s)| {
            let norm = frobenius_distance(t.values(), s.values());
            if norm == 0.0 {
                return vec![0.0; s.values().len()];
            }
            t.values().iter().zip(s.values()).map(|(a, b)| (b - a) / (norm * n)).collect()
        })
        .collect()
}

/// Chains an attention-map gradient back onto the feature planes:
/// `dA/dF_d = p |F_d|^(p-1) sign(F_d)`.
pub fn attention_backward(features: &FeatureMap, power: f64, dattention: &[f64]) -> Vec<f64> {
    let ss = features.size() * features.size();
    let mut out = vec![0.0; features.values().len()];
    for d in 0..features.channels() {
        for s in 0..ss {
            let f = features.values()[d * ss + s];
            let local = if power == 2.0 {
                2.0 * f
            } else if f == 0.0 {
                0.0
            } else {
                power * f.abs().powf(power - 1.0) * f.signum()
            };
            out[d * ss + s] = local * dattention[s];
        }
    }
    out
}

/// Gradient of [`pad_loss`] with respect to the student features.
pub fn pad_loss_grad(batch: &ProposalPairBatch) -> Vec<Vec<f64>> {
    pad_loss_grad_attention(batch)
        .iter()
        .zip(&batch.student)
        .map(|(da, f)| attention_backward(f, batch.power, da))
        .collect()
}

/// Teacher-attention-weighted squared feature error, averaged over channels
/// and positions within a proposal and over proposals.
pub fn afd_loss(batch: &ProposalPairBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for ((t, s), a) in batch.teacher.iter().zip(&batch.student).zip(&batch.teacher_attention) {
        let ss = t.size() * t.size();
        let mut acc = 0.0;
        for (k, (ft, fs)) in t.values().iter().zip(s.values()).enumerate() {
            let diff = ft - fs;
            acc += diff * diff * a.values()[k % ss];
        }
        total += acc / t.values().len() as f64;
    }
    total / batch.len() as f64
}

/// Gradient of [`afd_loss`] with respect to the student features (the teacher
/// attention is a constant).
pub fn afd_loss_grad(batch: &ProposalPairBatch) -> Vec<Vec<f64>> {
    let n = batch.len() as f64;
    batch
        .teacher
        .iter()
        .zip(&batch.student)
        .zip(&batch.teacher_attention)
        .map(|((t, s), a)| {
            let ss = t.size() * t.size();
            let scale = 2.0 / (t.values().len() as f64 * n);
            t.values()
                .iter()
                .zip(s.values())
                .enumerate()
                .map(|(k, (ft, fs))| scale * (fs - ft) * a.values()[k % ss])
                .collect()
        })
        .collect()
}

pub fn ard_loss(batch: &ProposalPairBatch, gamma: f64) -> f64 {
    afd_loss(batch) + gamma * pad_loss(batch)
}

pub fn ard_loss_grad(batch: &ProposalPairBatch, gamma: f64) -> Vec<Vec<f64>> {
    let mut g = afd_loss_grad(batch);
    if gamma != 0.0 {
        for (gi, pi) in g.iter_mut().zip(pad_loss_grad(batch)) {
            for (a, b) in gi.iter_mut().zip(pi) {
                *a += gamma * b;
            }
        }
    }
    g
}

/// Head column layout: column 0 is background, the next `old` columns are
/// classes from earlier tasks, the last `new` columns belong to the current
/// task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub old: usize,
    pub new: usize,
}

impl ClassPartition {
    pub fn width(&self) -> usize {
        1 + self.old + self.new
    }

    pub fn old_columns(&self) -> std::ops::Range<usize> {
        1..1 + self.old
    }

    pub fn new_columns(&self) -> std::ops::Range<usize> {
        1 + self.old..self.width()
    }
}

fn check_rows(probs: &[Vec<f64>], width: usize) -> Result<()> {
    for (i, row) in probs.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Shape(format!("probability row {i} has {} entries, expected {width}", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("probability row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, width: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} proposals", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= width) {
        return Err(Error::invalid(format!("label column {l} outside head width {width}")));
    }
    Ok(())
}

/// Mean over proposals; background-labelled proposals count old-class mass as
/// background, labelled ones use plain cross-entropy. `labels` are head
/// columns (0 = background).
pub fn inclusive_classification_loss(probs: &[Vec<f64>], labels: &[usize], part: ClassPartition) -> Result<f64> {
    check_rows(probs, part.width())?;
    check_labels(labels, probs.len(), part.width())?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            if l == 0 {
                let q = p[0] + p[part.old_columns()].iter().sum::<f64>();
                -q.ln()
            } else {
                -p[l].ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// [`inclusive_classification_loss`] on logits, with its gradient. Uses
/// log-sum-exp so saturated rows stay finite.
pub fn inclusive_classification_with_grad(
    logits: &[Vec<f64>],
    labels: &[usize],
    part: ClassPartition,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_labels(labels, logits.len(), part.width())?;
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &l) in logits.iter().zip(labels) {
        if z.len() != part.width() {
            return Err(Error::Shape(format!("logit row has {} entries, expected {}", z.len(), part.width())));
        }
        let p = softmax(z);
        let lse = log_sum_exp(z.iter().cloned());
        let mut g = p.clone();
        if l == 0 {
            let cols = std::iter::once(0).chain(part.old_columns());
            let lse_q = log_sum_exp(cols.clone().map(|j| z[j]));
            loss += lse - lse_q;
            for j in cols {
                g[j] -= (z[j] - lse_q).exp();
            }
        } else {
            loss += lse - z[l];
            g[l] -= 1.0;
        }
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok((loss / n, grads))
}

/// Plain softmax cross-entropy on logits (the fine-tuning baseline).
pub fn cross_entropy_with_grad(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let width = logits.first().map_or(0, Vec::len);
    check_labels(labels, logits.len(), width)?;
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &l) in logits.iter().zip(labels) {
        let p = softmax(z);
        loss += log_sum_exp(z.iter().cloned()) - z[l];
        let mut g = p;
        g[l] -= 1.0;
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok((loss / n, grads))
}

/// Inclusive distillation, summed over proposals and scaled by
/// `1 / (old + 1)`. Background-labelled proposals match the teacher's
/// background probability against the student's background plus new-class
/// mass; labelled proposals match each old class individually. Returns 0
/// when there are no old classes.
pub fn inclusive_distillation_loss(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    labels: &[usize],
    part: ClassPartition,
) -> Result<f64> {
    if part.old == 0 {
        return Ok(0.0);
    }
    check_rows(teacher, 1 + part.old)?;
    check_rows(student, part.width())?;
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!("{} teacher rows vs {} student rows", teacher.len(), student.len())));
    }
    check_labels(labels, student.len(), part.width())?;
    let omega = (part.old + 1) as f64;
    let mut total = 0.0;
    for ((t, s), &l) in teacher.iter().zip(student).zip(labels) {
        if l == 0 {
            let q = s[0] + s[part.new_columns()].iter().sum::<f64>();
            total += t[0] * q.ln();
        } else {
            for c in part.old_columns() {
                total += t[c] * s[c].ln();
            }
        }
    }
    Ok(-total / omega)
}

/// [`inclusive_distillation_loss`] with the student given as logits, and the
/// gradient with respect to those logits.
pub fn inclusive_distillation_with_grad(
    teacher: &[Vec<f64>],
    student_logits: &[Vec<f64>],
    labels: &[usize],
    part: ClassPartition,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if part.old == 0 {
        return Ok((0.0, vec![vec![0.0; part.width()]; student_logits.len()]));
    }
    check_rows(teacher, 1 + part.old)?;
    if teacher.len() != student_logits.len() {
        return Err(Error::Shape(format!(
            "{} teacher rows vs {} student rows",
            teacher.len(),
            student_logits.len()
        )));
    }
    check_labels(labels, student_logits.len(), part.width())?;
    let omega = (part.old + 1) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student_logits.len());
    for ((t, z), &l) in teacher.iter().zip(student_logits).zip(labels) {
        if z.len() != part.width() {
            return Err(Error::Shape(format!("logit row has {} entries, expected {}", z.len(), part.width())));
        }
        let p = softmax(z);
        let lse = log_sum_exp(z.iter().cloned());
        let mut g = vec![0.0; z.len()];
        if l == 0 {
            // -t_b * log(sum_{j in B} p_j), B = background and new classes
            let cols = std::iter::once(0).chain(part.new_columns());
            let lse_q = log_sum_exp(cols.clone().map(|j| z[j]));
            loss += t[0] * (lse - lse_q);
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = t[0] * p[j];
            }
            for j in cols {
                g[j] -= t[0] * (z[j] - lse_q).exp();
            }
        } else {
            let mass: f64 = t[1..].iter().sum();
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = mass * p[j];
            }
            for c in part.old_columns() {
                loss += t[c] * (lse - z[c]);
                g[c] -= t[c];
            }
        }
        grads.push(g.into_iter().map(|v| v / omega).collect());
    }
    Ok((loss / omega, grads))
}

/// Detection loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLosses {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub classification: f64,
    pub head_box: f64,
}

impl DetectionLosses {
    pub fn total(&self) -> f64 {
        self.rpn_objectness + self.rpn_box + self.classification + self.head_box
    }
}

pub fn total_loss(detection: f64, id: f64, ard: f64, w: &LossWeights) -> f64 {
    detection + w.alpha * id + w.beta * ard
}

/// One structured per-step record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub task: usize,
    pub det: f64,
    pub ic: f64,
    pub id: f64,
    pub afd: f64,
    pub pad: f64,
    pub total: f64,
}
