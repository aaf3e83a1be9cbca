//! One forward pass of the two-stage detector on a shapes image: backbone
//! features, RPN proposals, and the final detections of an untrained head.
//!
//! cargo run --release --example detector_forward

use abr::data::{generate_shapes_dataset, ShapesConfig};
use abr::detector::{DetectionModel, DetectorConfig};
use abr::ClassId;

fn main() -> abr::Result<()> {
    let ds = generate_shapes_dataset(&ShapesConfig {
        images_per_class: 1,
        ..ShapesConfig::default()
    })?;
    let img = &ds.images[0];
    let mut rng = abr::rng::stream(0, "init", 0);
    let mut model = DetectionModel::new(DetectorConfig::default(), &mut rng);
    model.grow_head(&[ClassId(1), ClassId(2), ClassId(3)], &mut rng);
    println!("{} parameters, head width {}", model.num_parameters(), model.head_width());

    let (features, proposals, _) = model.forward(img);
    println!(
        "features {}x{}x{} (stride {}), {} proposals",
        features.channels,
        features.height,
        features.width,
        features.stride,
        proposals.len()
    );
    let rois: Vec<_> = proposals.iter().take(3).map(|p| p.bbox).collect();
    for (b, p) in rois.iter().zip(model.classify(&features, &rois)) {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        println!("  roi {:?} -> [{}]", b.corners(), row.join(", "));
    }
    println!("{} detections above the score threshold", model.detect(img).len());
    Ok(())
}
