//! Pascal-VOC style XML annotation ingestion.

use std::fs;
use std::path::Path;

use crate::data::manifest::{ClassMap, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::{Annotation, BoundingBox};

/// The 20 VOC categories in their conventional (alphabetical) order.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub fn voc_class_map() -> ClassMap {
    ClassMap::new(VOC_CLASSES.iter().map(|s| s.to_string()).collect()).expect("unique names")
}

/// Loads every `*.xml` file in `dir` using the standard VOC class list.
pub fn load_voc_annotations(dir: &Path) -> Result<DatasetManifest> {
    load_voc_annotations_with_classes(dir, voc_class_map())
}

/// Loads every `*.xml` file in `dir`; object names must belong to `classes`.
/// Entries are sorted by image path.
pub fn load_voc_annotations_with_classes(dir: &Path, classes: ClassMap) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")) {
            files.push(path);
        }
    }
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for path in &files {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        entries.push(parse_voc_xml(&text, &classes, path)?);
    }
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(DatasetManifest { classes, entries })
}

/// Parses one annotation document. `origin` only labels errors.
pub fn parse_voc_xml(text: &str, classes: &ClassMap, origin: &Path) -> Result<ManifestEntry> {
    let err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        message,
    };
    let doc = roxmltree::Document::parse(text).map_err(|e| err(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(err(format!("root element `{}`", root.tag_name().name())));
    }
    let text_of = |node: roxmltree::Node<'_, '_>, name: &str| -> Result<String> {
        child(node, name)
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
            .ok_or_else(|| err(format!("missing <{name}>")))
    };
    let number = |node: roxmltree::Node<'_, '_>, name: &str| -> Result<f32> {
        let t = text_of(node, name)?;
        t.parse::<f32>()
            .map_err(|_| err(format!("<{name}> is not a number: `{t}`")))
    };

    let filename = text_of(root, "filename")?;
    let size = child(root, "size").ok_or_else(|| err("missing <size>".into()))?;
    let width = number(size, "width")? as usize;
    let height = number(size, "height")? as usize;

    let mut objects = Vec::new();
    for obj in root
        .children()
        .filter(|c| c.is_element() && c.tag_name().name() == "object")
    {
        let name = text_of(obj, "name")?;
        let class_id = classes.id(&name).ok_or_else(|| Error::UnknownClass(name.clone()))?;
        let difficult = child(obj, "difficult")
            .and_then(|d| d.text())
            .is_some_and(|t| t.trim() == "1");
        let bb = child(obj, "bndbox").ok_or_else(|| err("missing <bndbox>".into()))?;
        let (xmin, ymin) = (number(bb, "xmin")?, number(bb, "ymin")?);
        let (xmax, ymax) = (number(bb, "xmax")?, number(bb, "ymax")?);
        let bbox = BoundingBox::from_corners(xmin, ymin, xmax, ymax)
            .map_err(|e| err(format!("object `{name}`: {e}")))?;
        objects.push(Annotation {
            bbox,
            class_id,
            difficult,
        });
    }
    Ok(ManifestEntry {
        image: format!("JPEGImages/{filename}"),
        width,
        height,
        objects,
    })
}

fn child<'a, 'input>(
    node: roxmltree::Node<'a, 'input>,
    name: &str,
) -> Option<roxmltree::Node<'a, 'input>> {
    node.children()
        .find(|c| c.is_element() && c.tag_name().name() == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassId;

    fn xml(objects: &str) -> String {
        format!(
            "<annotation><filename>000001.jpg</filename>\
             <size><width>100</width><height>80</height><depth>3</depth></size>{objects}</annotation>"
        )
    }

    const DOG: &str = "<object><name>dog</name><difficult>0</difficult>\
        <bndbox><xmin>10</xmin><ymin>20</ymin><xmax>50</xmax><ymax>60</ymax></bndbox></object>";

    #[test]
    fn parses_dog_box() {
        let e = parse_voc_xml(&xml(DOG), &voc_class_map(), Path::new("a.xml")).unwrap();
        assert_eq!(e.objects.len(), 1);
        let a = e.objects[0];
        assert_eq!(a.bbox, BoundingBox::new(10.0, 20.0, 40.0, 40.0).unwrap());
        assert_eq!(a.class_id, voc_class_map().id("dog").unwrap());
        assert_eq!(a.class_id, ClassId(12));
        assert_eq!((e.width, e.height), (100, 80));
    }

    #[test]
    fn zero_objects() {
        let e = parse_voc_xml(&xml(""), &voc_class_map(), Path::new("a.xml")).unwrap();
        assert!(e.objects.is_empty());
    }

    #[test]
    fn malformed_xml_names_file() {
        let err = parse_voc_xml("<annotation><filename>", &voc_class_map(), Path::new("bad.xml"))
            .unwrap_err();
        assert!(err.to_string().contains("bad.xml"));
    }

    #[test]
    fn unknown_class_rejected() {
        let obj = DOG.replace("dog", "unicorn");
        assert!(matches!(
            parse_voc_xml(&xml(&obj), &voc_class_map(), Path::new("a.xml")),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn difficult_flag() {
        let obj = DOG.replace("<difficult>0", "<difficult>1");
        let e = parse_voc_xml(&xml(&obj), &voc_class_map(), Path::new("a.xml")).unwrap();
        assert!(e.objects[0].difficult);
    }

    #[test]
    fn directory_load_shares_class_map() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.xml"), xml(DOG).replace("000001", "000002")).unwrap();
        fs::write(dir.path().join("a.xml"), xml(DOG)).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let m = load_voc_annotations(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].image, "JPEGImages/000001.jpg");
        assert_eq!(m.classes.names().iter().filter(|n| *n == "dog").count(), 1);
    }
}
