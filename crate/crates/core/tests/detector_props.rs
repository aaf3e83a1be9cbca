use abr::detector::{roi_pool, DetectionModel, DetectorConfig, FeatureTensor};
use abr::{BoundingBox, ClassId, Image};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(classes: u32, seed: u64) -> DetectionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DetectionModel::new(DetectorConfig::default(), &mut rng);
    let ids: Vec<ClassId> = (1..=classes).map(ClassId).collect();
    m.grow_head(&ids, &mut rng);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_field_pools_exactly(
        value in -4.0f32..4.0,
        u in 0.0f32..30.0, v in 0.0f32..20.0, w in 0.5f32..10.0, h in 0.5f32..10.0,
        size in 1usize..8,
    ) {
        let f = FeatureTensor::filled(3, 6, 9, 4, value);
        let b = BoundingBox::new(u, v, w.min(36.0 - u), h.min(24.0 - v)).unwrap();
        let maps = roi_pool(&f, &[b], size);
        prop_assert!(maps[0].values().iter().all(|&x| x == value as f64));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn grow_head_keeps_old_logits_bit_exact(seed in any::<u64>(), old in 1u32..4, added in 1u32..4) {
        let m = model(old, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let img = Image::from_fn(48, 48, |y, x| {
            let k = ((y * 7 + x * 13) as u64 ^ seed) % 97;
            [k as f32 / 97.0, 0.5, 1.0 - k as f32 / 97.0]
        });
        let (f, proposals, _) = m.forward(&img);
        let mut rois: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
        rois.push(BoundingBox::new(4.0, 4.0, 20.0, 12.0).unwrap());
        let pooled = m.pool(&f, &rois);
        let before = m.head_forward(&pooled, rois.len());

        let mut grown = m.clone();
        let new: Vec<ClassId> = (old + 1..=old + added).map(ClassId).collect();
        grown.grow_head(&new, &mut rng);
        prop_assert_eq!(grown.head_width(), m.head_width() + added as usize);
        let after = grown.head_forward(&pooled, rois.len());
        let (wb, wa) = (m.head_width(), grown.head_width());
        for r in 0..rois.len() {
            prop_assert_eq!(&before.logits[r * wb..(r + 1) * wb], &after.logits[r * wa..r * wa + wb]);
        }
    }
}
