//! The two-stage detector, RoI pooling and spatial attention.

pub mod boxes;
pub mod features;
pub mod model;
pub mod nn;
pub mod targets;

pub use features::{attention_map, roi_pool, AttentionMap, FeatureMap, FeatureTensor};
pub use model::{Checkpoint, Detection, DetectionModel, DetectorConfig, Proposal, CHECKPOINT_FORMAT};
