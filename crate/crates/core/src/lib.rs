pub mod augment;
pub mod buffer;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{crop, iou, AnnotatedImage, Annotation, BoundingBox, ClassId, Image};
