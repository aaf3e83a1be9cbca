//! Run configuration: a nested struct addressed through flat dotted keys
//! (`train.lr`, `loss.alpha`, ...). Files are TOML; `--set key=value`
//! overrides are applied on top with per-key type checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{MixupParams, MosaicParams, ReplayConfig, DEFAULT_REPLAY_RATIO};
use crate::buffer::SelectionStrategy;
use crate::data::ShapesConfig;
use crate::detector::targets::SamplingConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::{FpConfig, Interpolation};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations_initial: usize,
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Images per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between loss-log lines on stderr; 0 silences them.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations_initial: 1500,
            iterations: 1500,
            lr_initial: 0.02,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 2,
            clip_norm: 10.0,
            seed: 0,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    /// Capacity M in boxes.
    pub capacity: usize,
    pub strategy: SelectionStrategy,
}

impl Default for BufferSection {
    fn default() -> Self {
        Self {
            capacity: 120,
            strategy: SelectionStrategy::Prototype,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub mixup: bool,
    pub mosaic: bool,
    /// Relative frequencies of mixup, mosaic and unmodified samples.
    pub ratio: Vec<f64>,
    pub beta_a: f64,
    pub beta_b: f64,
    pub overlap_threshold: f32,
    pub max_boxes: usize,
    pub candidates: usize,
    pub retries: usize,
    pub mu_min: f32,
    pub mu_max: f32,
    pub fill: f32,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let m = MixupParams::default();
        let s = MosaicParams::default();
        Self {
            mixup: true,
            mosaic: true,
            ratio: DEFAULT_REPLAY_RATIO.to_vec(),
            beta_a: m.beta_a,
            beta_b: m.beta_b,
            overlap_threshold: m.overlap_threshold,
            max_boxes: m.max_boxes,
            candidates: m.candidates,
            retries: m.retries,
            mu_min: s.mu_min,
            mu_max: s.mu_max,
            fill: s.fill,
        }
    }
}

impl ReplaySection {
    pub fn to_replay_config(&self) -> ReplayConfig {
        ReplayConfig {
            mixup: MixupParams {
                beta_a: self.beta_a,
                beta_b: self.beta_b,
                overlap_threshold: self.overlap_threshold,
                max_boxes: self.max_boxes,
                candidates: self.candidates,
                retries: self.retries,
            },
            mosaic: MosaicParams {
                mu_min: self.mu_min,
                mu_max: self.mu_max,
                fill: self.fill,
            },
            enable_mixup: self.mixup,
            enable_mosaic: self.mosaic,
            ratio: [
                self.ratio.first().copied().unwrap_or(0.0),
                self.ratio.get(1).copied().unwrap_or(0.0),
                self.ratio.get(2).copied().unwrap_or(0.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Exponent p of the attention map.
    pub power: f64,
    /// Inclusive classification (old-class mass counts as background on
    /// background proposals); `false` is plain cross-entropy.
    pub inclusive: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            power: 2.0,
            inclusive: true,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub eleven_point: bool,
    pub fp_iou: f64,
    pub fp_confidence: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5],
            eleven_point: false,
            fp_iou: 0.1,
            fp_confidence: 0.5,
        }
    }
}

impl EvalSection {
    pub fn interpolation(&self) -> Interpolation {
        if self.eleven_point {
            Interpolation::ElevenPoint
        } else {
            Interpolation::AllPoint
        }
    }

    pub fn fp(&self) -> FpConfig {
        FpConfig {
            iou_floor: self.fp_iou,
            confidence_floor: self.fp_confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory with `train/` and `test/` manifests; empty means the
    /// synthetic shapes set is generated in memory.
    pub root: String,
    /// `A-B` split (first A classes, then B per task) or a path to a
    /// class-list file.
    pub protocol: String,
    pub shapes_classes: usize,
    pub shapes_train_per_class: usize,
    pub shapes_test_per_class: usize,
    pub shapes_image_size: usize,
    pub shapes_min_object: usize,
    pub shapes_max_object: usize,
    pub shapes_max_objects: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = ShapesConfig::default();
        Self {
            root: String::new(),
            protocol: "4-4".into(),
            shapes_classes: s.num_classes,
            shapes_train_per_class: 40,
            shapes_test_per_class: 20,
            shapes_image_size: s.image_size,
            shapes_min_object: s.min_object,
            shapes_max_object: s.max_object,
            shapes_max_objects: s.max_objects_per_image,
        }
    }
}

impl DataSection {
    /// Shapes generator settings for the train (`test = false`) or test split.
    /// The two splits use disjoint seed streams.
    pub fn shapes(&self, seed: u64, test: bool) -> ShapesConfig {
        ShapesConfig {
            num_classes: self.shapes_classes,
            images_per_class: if test {
                self.shapes_test_per_class
            } else {
                self.shapes_train_per_class
            },
            image_size: self.shapes_image_size,
            min_object: self.shapes_min_object,
            max_object: self.shapes_max_object,
            max_objects_per_image: self.shapes_max_objects,
            seed: seed.wrapping_mul(2).wrapping_add(test as u64) ^ 0x5eed_0000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub model: DetectorConfig,
    pub sampling: SamplingConfig,
    pub buffer: BufferSection,
    pub replay: ReplaySection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() => "unsigned integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Number(o), Value::Number(n)) => !o.is_u64() || n.is_u64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) | (Value::Array(_), Value::Array(_)) => true,
        _ => false,
    }
}

impl TrainConfig {
    /// Every key with its current value.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        out
    }

    /// Sets one dotted key, checking it exists and the value has the right
    /// type.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        let config_err = |message: String| Error::Config {
            key: key.to_string(),
            message,
        };
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| config_err("unknown key".into()))?;
        }
        if slot.is_object() {
            return Err(config_err("names a section, not a key".into()));
        }
        if !compatible(slot, &value) {
            return Err(config_err(format!("expected {}, got {}", kind(slot), kind(&value))));
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    /// Applies a `key=value` override; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            message: "override must look like key=value".into(),
        })?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key")).map_err(Error::from)?,
            Err(_) => Value::String(raw.to_string()),
        };
        self.set(key, value)
    }

    /// Layers a TOML document over `self`.
    pub fn merge_toml(&mut self, text: &str, origin: &Path) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(table)?, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the overrides, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.merge_toml(&text, path)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.train.iterations_initial == 0 || self.train.iterations == 0 {
            return bad("train.iterations", "must be > 0");
        }
        if !(self.train.lr_initial > 0.0 && self.train.lr > 0.0) {
            return bad("train.lr", "learning rates must be > 0");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be > 0");
        }
        if self.model.backbone.is_empty() || self.model.anchor_sizes.is_empty() || self.model.anchor_ratios.is_empty() {
            return bad("model", "backbone, anchor sizes and ratios must be non-empty");
        }
        self.loss.weights().validate()?;
        if self.loss.power <= 0.0 {
            return bad("loss.power", "must be > 0");
        }
        if self.replay.ratio.len() != 3
            || self.replay.ratio.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.replay.ratio.iter().sum::<f64>() <= 0.0
        {
            return bad("replay.ratio", "needs three non-negative weights with a positive sum");
        }
        self.replay.to_replay_config().mixup.validate()?;
        Ok(())
    }

    /// TOML snapshot of every resolved key.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises as TOML")
    }
}
