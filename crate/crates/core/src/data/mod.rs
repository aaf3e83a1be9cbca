//! Dataset ingestion, incremental task splitting and the synthetic shapes generator.

pub mod layout;
pub mod manifest;
pub mod protocol;
pub mod shapes;
pub mod voc;

pub use layout::{load_split, Split};
pub use manifest::{ClassMap, DatasetManifest, DiskImages, ImageSource, ManifestEntry};
pub use protocol::{split_tasks, ProtocolPlan, TaskData, TaskSample, TaskSpec};
pub use shapes::{generate_shapes_dataset, ShapesConfig, ShapesDataset};
pub use voc::{load_voc_annotations, load_voc_annotations_with_classes};
