//! On-disk dataset layouts accepted by `data.root`.
//!
//! * `root/{train,test}/manifest.jsonl`, image paths relative to the split
//!   directory (what `gen-shapes` writes);
//! * a VOC year directory with `Annotations/`, `JPEGImages/` and optionally
//!   `ImageSets/Main/{trainval,test}.txt` selecting the splits.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::data::manifest::{ClassMap, DatasetManifest, DiskImages};
use crate::data::voc::load_voc_annotations;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn voc_list(self) -> &'static str {
        match self {
            Split::Train => "trainval",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "trainval" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (train or test)"))),
        }
    }
}

/// Loads one split. `classes` pins the id assignment (pass the train split's
/// map when loading the test split).
pub fn load_split(root: &Path, split: Split, classes: Option<ClassMap>) -> Result<(DatasetManifest, DiskImages)> {
    let dir = root.join(split.dir_name());
    let jsonl = dir.join("manifest.jsonl");
    if jsonl.exists() {
        let manifest = DatasetManifest::read(&jsonl, classes)?;
        let images = DiskImages::new(&dir, &manifest);
        return Ok((manifest, images));
    }
    let annotations = root.join("Annotations");
    if annotations.is_dir() {
        let mut manifest = load_voc_annotations(&annotations)?;
        let list = root.join("ImageSets/Main").join(format!("{}.txt", split.voc_list()));
        if list.exists() {
            let text = fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
            let ids: HashSet<&str> = text.split_whitespace().collect();
            manifest.entries.retain(|e| {
                Path::new(&e.image)
                    .file_stem()
                    .is_some_and(|s| ids.contains(s.to_string_lossy().as_ref()))
            });
        }
        let images = DiskImages::new(root, &manifest);
        return Ok((manifest, images));
    }
    Err(Error::invalid(format!(
        "{} holds neither {}/manifest.jsonl nor a VOC Annotations directory",
        root.display(),
        split.dir_name()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, ImageSource, ShapesConfig};

    #[test]
    fn jsonl_layout_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_shapes_dataset(&ShapesConfig {
            num_classes: 3,
            images_per_class: 2,
            ..ShapesConfig::default()
        })
        .unwrap();
        ds.write_to_dir(&dir.path().join("train")).unwrap();
        let (m, images) = load_split(dir.path(), Split::Train, None).unwrap();
        assert_eq!(m, ds.manifest);
        assert_eq!(images.image(3).unwrap(), ds.images[3]);
        assert!(load_split(dir.path(), Split::Test, None).is_err());
    }
}
