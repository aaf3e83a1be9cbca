//! Mixup and mosaic box replay on a new-task image, written as PNGs with
//! groundtruth outlined in green and replayed boxes in red.
//!
//! cargo run --example replay_augmentation

use abr::augment::{mixup_replay, mosaic_replay, render_preview, MixupParams, MosaicParams};
use abr::buffer::BoxExemplar;
use abr::data::{generate_shapes_dataset, ShapesConfig};
use abr::crop;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> abr::Result<()> {
    let ds = generate_shapes_dataset(&ShapesConfig {
        num_classes: 4,
        images_per_class: 4,
        ..ShapesConfig::default()
    })?;
    // crops of classes 1-2 play the buffer; an image of classes 3-4 is the new sample
    let mut exemplars = Vec::new();
    for (i, e) in ds.manifest.entries.iter().enumerate() {
        for a in e.objects.iter().filter(|a| a.class_id.0 <= 2) {
            exemplars.push(BoxExemplar {
                pixels: crop(&ds.images[i], &a.bbox)?,
                class_id: a.class_id,
                source_image: i,
                source_box: a.bbox,
                distance: 0.0,
            });
        }
    }
    let (idx, entry) = ds
        .manifest
        .entries
        .iter()
        .enumerate()
        .find(|(_, e)| e.objects.iter().all(|a| a.class_id.0 > 2))
        .expect("an image with only new classes");
    let image = &ds.images[idx];
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let out = std::path::Path::new("replay-demo");
    std::fs::create_dir_all(out).map_err(|e| abr::Error::io(out, e))?;
    let mixed = mixup_replay(image, &entry.objects, &exemplars[..4], &MixupParams::default(), &mut rng)?;
    for p in &mixed.trace.placements {
        println!("mixup: class {} at ({}, {}) lambda {:.2}", p.class_id.0, p.u, p.v, p.lambda.unwrap_or(1.0));
    }
    render_preview(&mixed).save_png(&out.join("mixup.png"))?;

    let mosaic = mosaic_replay(image, &exemplars[..4], &MosaicParams::default(), &mut rng)?;
    println!("mosaic centre {:?}", mosaic.trace.center);
    for p in &mosaic.trace.placements {
        println!("mosaic: class {} {}x{} at ({}, {}) mu {:.2}", p.class_id.0, p.w, p.h, p.u, p.v, p.mu.unwrap_or(0.0));
    }
    render_preview(&mosaic).save_png(&out.join("mosaic.png"))?;
    println!("wrote {}/mixup.png and mosaic.png", out.display());
    Ok(())
}
