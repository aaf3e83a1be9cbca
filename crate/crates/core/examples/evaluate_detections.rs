//! VOC-style AP on a hand-made case, then a full old/new/all report.
//!
//! cargo run --example evaluate_detections

use abr::eval::{average_precision, map_report, ClassGroups, DetectionResult, FpConfig, GroundTruth, Interpolation};
use abr::{BoundingBox, ClassId};

fn b(u: f32, v: f32) -> BoundingBox {
    BoundingBox::new(u, v, 20.0, 20.0).expect("valid box")
}

fn main() -> abr::Result<()> {
    let gts: Vec<GroundTruth> = [(0, 1, 0.0), (0, 2, 40.0), (1, 1, 0.0), (1, 3, 60.0)]
        .iter()
        .map(|&(image_id, c, u)| GroundTruth {
            image_id,
            class_id: ClassId(c),
            bbox: b(u, 0.0),
            difficult: false,
        })
        .collect();
    // two hits for class 1, one of them ranked below a false positive
    let dets: Vec<DetectionResult> = [(0, 1, 0.0, 0.9), (1, 1, 100.0, 0.8), (1, 1, 1.0, 0.7), (0, 2, 41.0, 0.6)]
        .iter()
        .map(|&(image_id, c, u, confidence)| DetectionResult {
            image_id,
            class_id: ClassId(c),
            bbox: b(u, 0.0),
            confidence,
        })
        .collect();

    let class1: Vec<_> = gts.iter().filter(|g| g.class_id == ClassId(1)).copied().collect();
    let dets1: Vec<_> = dets.iter().filter(|d| d.class_id == ClassId(1)).copied().collect();
    for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
        println!("class 1 AP ({interp:?}): {:.4}", average_precision(&dets1, &class1, 0.5, interp).unwrap_or(0.0));
    }

    let groups = ClassGroups {
        old: vec![ClassId(1), ClassId(2)],
        new: vec![ClassId(3)],
    };
    let report = map_report(&dets, &gts, &groups, &[0.5, 0.75], Interpolation::AllPoint, &FpConfig::default())?;
    print!("{}", report.render_table("toy report"));
    println!("{}", report.to_json()?);
    Ok(())
}
