//! Dataset manifests: image entries with their full annotation lists and the
//! class-name mapping. Serialized as JSON lines, one image per line.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BoundingBox, ClassId, Image};

/// Class names indexed by id; id `k` (1-based) is `names[k - 1]`, id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::invalid("duplicate class names"));
        }
        Ok(Self { names })
    }

    /// Ids assigned in sorted name order.
    pub fn from_names_sorted<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self {
            names: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ClassId(i as u32 + 1))
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        if id.is_background() {
            return None;
        }
        self.names.get(id.0 as usize - 1).map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (1..=self.names.len() as u32).map(ClassId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's root directory.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub classes: ClassMap,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class: String,
    u: f32,
    v: f32,
    w: f32,
    h: f32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    difficult: bool,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    image: String,
    width: usize,
    height: usize,
    objects: Vec<ObjectRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of annotated instances per class id (index 0 unused).
    pub fn instance_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len() + 1];
        for a in self.entries.iter().flat_map(|e| &e.objects) {
            counts[a.class_id.0 as usize] += 1;
        }
        counts
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let rec = EntryRecord {
                image: e.image.clone(),
                width: e.width,
                height: e.height,
                objects: e
                    .objects
                    .iter()
                    .map(|a| {
                        let class = self
                            .classes
                            .name(a.class_id)
                            .ok_or_else(|| Error::UnknownClass(a.class_id.to_string()))?;
                        Ok(ObjectRecord {
                            class: class.to_string(),
                            u: a.bbox.u(),
                            v: a.bbox.v(),
                            w: a.bbox.w(),
                            h: a.bbox.h(),
                            difficult: a.difficult,
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON lines. Class ids follow `classes` when given, otherwise the
    /// sorted set of names found in the file.
    pub fn from_jsonl(text: &str, classes: Option<ClassMap>, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: EntryRecord =
                serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            records.push(rec);
        }
        let classes = classes.unwrap_or_else(|| {
            ClassMap::from_names_sorted(
                records
                    .iter()
                    .flat_map(|r| r.objects.iter().map(|o| o.class.clone())),
            )
        });
        let mut entries = Vec::with_capacity(records.len());
        for rec in records {
            let mut objects = Vec::with_capacity(rec.objects.len());
            for o in rec.objects {
                let class_id = classes
                    .id(&o.class)
                    .ok_or_else(|| Error::UnknownClass(o.class.clone()))?;
                let bbox = BoundingBox::new(o.u, o.v, o.w, o.h)?;
                objects.push(Annotation {
                    bbox,
                    class_id,
                    difficult: o.difficult,
                });
            }
            entries.push(ManifestEntry {
                image: rec.image,
                width: rec.width,
                height: rec.height,
                objects,
            });
        }
        Ok(Self { classes, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, classes: Option<ClassMap>) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text, classes, path)
    }
}

/// Pixel access for manifest entries by index.
pub trait ImageSource {
    fn image(&self, index: usize) -> Result<Image>;
}

/// Images held in memory, aligned with manifest entries.
impl ImageSource for [Image] {
    fn image(&self, index: usize) -> Result<Image> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no image at index {index}")))
    }
}

impl ImageSource for Vec<Image> {
    fn image(&self, index: usize) -> Result<Image> {
        self.as_slice().image(index)
    }
}

/// Images loaded lazily from disk, relative to a root directory.
#[derive(Debug, Clone)]
pub struct DiskImages {
    pub root: PathBuf,
    pub paths: Vec<String>,
}

impl DiskImages {
    pub fn new(root: impl Into<PathBuf>, manifest: &DatasetManifest) -> Self {
        Self {
            root: root.into(),
            paths: manifest.entries.iter().map(|e| e.image.clone()).collect(),
        }
    }
}

impl ImageSource for DiskImages {
    fn image(&self, index: usize) -> Result<Image> {
        let rel = self
            .paths
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no image at index {index}")))?;
        Image::load(&self.root.join(rel))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        let classes = ClassMap::new(vec!["cat".into(), "dog".into()]).unwrap();
        DatasetManifest {
            classes,
            entries: vec![
                ManifestEntry {
                    image: "a.png".into(),
                    width: 10,
                    height: 8,
                    objects: vec![Annotation::new(
                        BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap(),
                        ClassId(2),
                    )],
                },
                ManifestEntry {
                    image: "b.png".into(),
                    width: 10,
                    height: 8,
                    objects: vec![],
                },
            ],
        }
    }

    #[test]
    fn jsonl_record_layout() {
        let text = manifest().to_jsonl().unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["image"], "a.png");
        assert_eq!(first["objects"][0]["class"], "dog");
        assert_eq!(first["objects"][0]["w"], 3.0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let m = manifest();
        let back =
            DatasetManifest::from_jsonl(&m.to_jsonl().unwrap(), Some(m.classes.clone()), Path::new("m"))
                .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_class_rejected() {
        let m = manifest();
        let only_cat = ClassMap::new(vec!["cat".into()]).unwrap();
        let err = DatasetManifest::from_jsonl(&m.to_jsonl().unwrap(), Some(only_cat), Path::new("m"))
            .unwrap_err();
        assert!(matches!(err, Error::UnknownClass(c) if c == "dog"));
    }

    #[test]
    fn class_map_ids_from_one() {
        let c = ClassMap::from_names_sorted(["b", "a", "b"]);
        assert_eq!(c.id("a"), Some(ClassId(1)));
        assert_eq!(c.name(ClassId(2)), Some("b"));
        assert_eq!(c.name(ClassId::BACKGROUND), None);
    }
}
