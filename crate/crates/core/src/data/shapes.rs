//! Synthetic coloured-shapes detection dataset.
//!
//! Each class is a distinct (shape, colour) pair drawn on a noisy dark
//! background. Shapes are specified by an integer centre and half-size `r`, so
//! every rendered shape is tight to the box `(cx - r, cy - r, 2r, 2r)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{ClassMap, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::{dequantize, quantize, Annotation, BoundingBox, ClassId, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Frame,
    Hourglass,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Frame,
        ShapeKind::Hourglass,
    ];

    fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Frame => "frame",
            ShapeKind::Hourglass => "hourglass",
        }
    }

    /// Whether the pixel whose centre is offset `(dx, dy)` from the shape
    /// centre is covered, for half-size `r`.
    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        if ax > r || ay > r {
            return false;
        }
        match self {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => true,
            ShapeKind::Triangle => {
                // apex at the top edge centre, base along the bottom edge
                let t = (dy + r) / (2.0 * r);
                ax <= r * t.max(0.0)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Cross => ax <= 0.3 * r || ay <= 0.3 * r,
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Frame => ax >= 0.55 * r || ay >= 0.55 * r,
            ShapeKind::Hourglass => ax <= ay,
        }
    }
}

const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.2, 0.35, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("magenta", [0.9, 0.2, 0.85]),
    ("cyan", [0.15, 0.85, 0.9]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Appearance of class `k` (0-based).
pub fn class_appearance(k: usize) -> (ShapeKind, &'static str, [f32; 3]) {
    let shape = ShapeKind::ALL[k % 8];
    let (name, rgb) = COLORS[(k + k / 8) % 8];
    (shape, name, rgb)
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| {
            let (shape, color, _) = class_appearance(k);
            format!("{:02}-{color}-{}", k + 1, shape.name())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Inclusive range of shape side lengths in pixels (even values are used).
    pub min_object: usize,
    pub max_object: usize,
    pub max_objects_per_image: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            images_per_class: 50,
            image_size: 64,
            min_object: 12,
            max_object: 24,
            max_objects_per_image: 4,
            seed: 0,
        }
    }
}

/// A placed shape, kept so that tests can re-derive the annotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeInstance {
    pub class_id: ClassId,
    pub kind: ShapeKind,
    pub cx: i32,
    pub cy: i32,
    pub r: i32,
}

impl ShapeInstance {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(
            (self.cx - self.r) as f32,
            (self.cy - self.r) as f32,
            (2 * self.r) as f32,
            (2 * self.r) as f32,
        )
        .expect("generator keeps shapes inside the canvas")
    }
}

#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub instances: Vec<Vec<ShapeInstance>>,
}

impl ShapesDataset {
    /// Writes `images/NNNNN.png` plus `manifest.jsonl` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (entry, img) in self.manifest.entries.iter().zip(&self.images) {
            img.save_png(&dir.join(&entry.image))?;
        }
        self.manifest.write(&dir.join("manifest.jsonl"))
    }
}

/// Draws a shape into `img`.
pub fn render_shape(img: &mut Image, inst: &ShapeInstance, rgb: [f32; 3]) {
    let r = inst.r as f32;
    for y in (inst.cy - inst.r).max(0)..(inst.cy + inst.r).min(img.height() as i32) {
        for x in (inst.cx - inst.r).max(0)..(inst.cx + inst.r).min(img.width() as i32) {
            let dx = x as f32 + 0.5 - inst.cx as f32;
            let dy = y as f32 + 0.5 - inst.cy as f32;
            if inst.kind.covers(dx, dy, r) {
                img.set_pixel(y as usize, x as usize, rgb);
            }
        }
    }
}

pub fn generate_shapes_dataset(config: &ShapesConfig) -> Result<ShapesDataset> {
    if config.num_classes < 2 {
        return Err(Error::invalid("shapes dataset needs at least 2 classes"));
    }
    if config.min_object < 8 || config.min_object > config.max_object {
        return Err(Error::invalid(format!(
            "object size range [{}, {}] invalid (minimum 8)",
            config.min_object, config.max_object
        )));
    }
    if config.image_size < config.max_object + 2 {
        return Err(Error::invalid(format!(
            "image size {} too small for objects up to {} px",
            config.image_size, config.max_object
        )));
    }
    if config.max_objects_per_image == 0 {
        return Err(Error::invalid("max_objects_per_image must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;
    let classes = ClassMap::new(class_names(config.num_classes))?;
    let total = config.num_classes * config.images_per_class;
    let r_min = (config.min_object / 2) as i32;
    let r_max = (config.max_object / 2) as i32;

    let mut entries = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    let mut all_instances = Vec::with_capacity(total);
    for n in 0..total {
        let base = rng.random_range(0.05f32..0.3);
        let mut img = Image::filled(size, size, 0.0);
        for px in img.data_mut() {
            let noise = rng.random_range(-0.04f32..0.04);
            *px = dequantize(quantize(base + noise));
        }

        let count = rng.random_range(1..=config.max_objects_per_image);
        let mut instances: Vec<ShapeInstance> = Vec::with_capacity(count);
        for k in 0..count {
            // the first object cycles through classes so each class gets its quota
            let class = if k == 0 {
                n % config.num_classes
            } else {
                rng.random_range(0..config.num_classes)
            };
            let mut placed = None;
            for _ in 0..50 {
                let r = rng.random_range(r_min..=r_max);
                let cx = rng.random_range(r..=size as i32 - r);
                let cy = rng.random_range(r..=size as i32 - r);
                let cand = ShapeInstance {
                    class_id: ClassId(class as u32 + 1),
                    kind: class_appearance(class).0,
                    cx,
                    cy,
                    r,
                };
                let clear = instances.iter().all(|o| {
                    // keep a 2-pixel gap so that boxes stay tight to visible pixels
                    (o.cx - cx).abs() >= o.r + r + 2 || (o.cy - cy).abs() >= o.r + r + 2
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            if let Some(inst) = placed {
                instances.push(inst);
            }
        }

        for inst in &instances {
            let (_, _, rgb) = class_appearance(inst.class_id.0 as usize - 1);
            let jitter = rng.random_range(-0.06f32..0.06);
            let color = rgb.map(|c| dequantize(quantize(c + jitter)));
            render_shape(&mut img, inst, color);
        }

        entries.push(ManifestEntry {
            image: format!("images/{n:05}.png"),
            width: size,
            height: size,
            objects: instances
                .iter()
                .map(|i| Annotation::new(i.bbox(), i.class_id))
                .collect(),
        });
        images.push(img);
        all_instances.push(instances);
    }
    Ok(ShapesDataset {
        manifest: DatasetManifest { classes, entries },
        images,
        instances: all_instances,
    })
}
