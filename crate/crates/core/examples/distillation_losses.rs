//! The distillation terms between a teacher and a student that has drifted
//! from it: attention distillation on pooled RoI features and inclusive
//! distillation on the head's class probabilities.
//!
//! cargo run --release --example distillation_losses

use abr::data::{generate_shapes_dataset, ShapesConfig};
use abr::detector::{DetectionModel, DetectorConfig};
use abr::losses::{
    afd_loss, ard_loss, inclusive_classification_loss, inclusive_distillation_loss, pad_loss, ClassPartition,
    ProposalPairBatch,
};
use abr::ClassId;
use rand::Rng;

fn main() -> abr::Result<()> {
    let ds = generate_shapes_dataset(&ShapesConfig {
        images_per_class: 1,
        ..ShapesConfig::default()
    })?;
    let img = &ds.images[0];
    let mut rng = abr::rng::stream(1, "init", 0);
    let mut teacher = DetectionModel::new(DetectorConfig::default(), &mut rng);
    teacher.grow_head(&[ClassId(1), ClassId(2)], &mut rng);

    let mut student = teacher.clone();
    student.grow_head(&[ClassId(3)], &mut rng);
    for p in student.params_mut() {
        for w in p.iter_mut() {
            *w += 0.02 * rng.random_range(-1.0..1.0f32);
        }
    }

    let (ft, proposals, _) = teacher.forward(img);
    let (fs, _, _) = student.forward(img);
    let rois: Vec<_> = proposals.iter().take(16).map(|p| p.bbox).collect();
    let batch = ProposalPairBatch::new(rois.clone(), student.roi_features(&fs, &rois), teacher.roi_features(&ft, &rois), 2.0)?;
    println!("PAD {:.4}  AFD {:.4}  ARD(gamma=1) {:.4}", pad_loss(&batch), afd_loss(&batch), ard_loss(&batch, 1.0));

    let part = ClassPartition { old: 2, new: 1 };
    let labels = vec![0; rois.len()];
    let pt = teacher.classify(&ft, &rois);
    let ps = student.classify(&fs, &rois);
    println!(
        "IC {:.4}  ID {:.4} on {} background proposals",
        inclusive_classification_loss(&ps, &labels, part)?,
        inclusive_distillation_loss(&pt, &ps, &labels, part)?,
        rois.len()
    );
    Ok(())
}
