use abr::augment::{compose, mosaic_replay, MosaicParams, ReplayConfig, ReplayKind};
use abr::buffer::{BoxBuffer, BoxExemplar};
use abr::{iou, Annotation, BoundingBox, ClassId, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exemplar(rng: &mut ChaCha8Rng, class: u32) -> BoxExemplar {
    let (w, h) = (rng.random_range(8..=28), rng.random_range(8..=28));
    let shade = rng.random_range(0.0..1.0);
    BoxExemplar {
        pixels: Image::filled(h, w, shade),
        class_id: ClassId(class),
        source_image: rng.random_range(0..100),
        source_box: BoundingBox::new(0.0, 0.0, w as f32, h as f32).unwrap(),
        distance: 0.0,
    }
}

fn old_buffer(rng: &mut ChaCha8Rng, old: u32, per_class: usize) -> BoxBuffer {
    let mut b = BoxBuffer::new(old as usize * per_class);
    b.seen_classes = (1..=old).map(ClassId).collect();
    for c in 1..=old {
        b.set_class(ClassId(c), (0..per_class).map(|_| exemplar(rng, c)).collect());
    }
    b
}

fn inside(b: &BoundingBox, img: &Image) -> bool {
    b.right() <= img.width() as f32 && b.bottom() <= img.height() as f32
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composed_samples_are_sound(seed in any::<u64>(), old in 1u32..4, per_class in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buffer = old_buffer(&mut rng, old, per_class);
        let (hh, ww) = (rng.random_range(48..=96), rng.random_range(48..=96));
        let image = Image::filled(hh, ww, 0.2);
        let gts: Vec<Annotation> = (0..rng.random_range(0..=3))
            .map(|_| {
                let (w, h) = (rng.random_range(8..=20), rng.random_range(8..=20));
                let b = BoundingBox::new(rng.random_range(0..=ww - w) as f32, rng.random_range(0..=hh - h) as f32, w as f32, h as f32);
                Annotation::new(b.unwrap(), ClassId(old + rng.random_range(1..=2)))
            })
            .collect();
        let config = ReplayConfig::enabled();
        let s = compose(&image, &gts, &buffer, &config, &mut rng).unwrap();
        for a in &s.annotations {
            prop_assert!(inside(&a.bbox, &s.pixels));
        }
        for a in s.replayed() {
            prop_assert!(a.class_id.0 >= 1 && a.class_id.0 <= old, "replayed class {}", a.class_id.0);
        }
        for a in s.groundtruth() {
            prop_assert!(a.class_id.0 > old);
        }
        match s.replay_kind {
            ReplayKind::Mixup => {
                prop_assert!(s.replayed().len() <= config.mixup.max_boxes);
                prop_assert_eq!(s.groundtruth(), gts.as_slice());
                for r in s.replayed() {
                    for g in &gts {
                        prop_assert!(iou(&r.bbox, &g.bbox) <= config.mixup.overlap_threshold);
                    }
                }
            }
            ReplayKind::Mosaic => {
                prop_assert_eq!(s.num_groundtruth, 0);
                prop_assert_eq!(s.replayed().len(), 4);
            }
            ReplayKind::New => prop_assert_eq!(&s.annotations, &gts),
        }
    }

    #[test]
    fn mosaic_boxes_are_disjoint(seed in any::<u64>(), hh in 32usize..128, ww in 32usize..128) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<BoxExemplar> = (1..=4).map(|c| exemplar(&mut rng, c)).collect();
        let s = mosaic_replay(&Image::filled(hh, ww, 0.9), &picks, &MosaicParams::default(), &mut rng).unwrap();
        prop_assert_eq!(s.annotations.len(), 4);
        for (i, a) in s.annotations.iter().enumerate() {
            prop_assert!(inside(&a.bbox, &s.pixels));
            for b in &s.annotations[i + 1..] {
                prop_assert_eq!(a.bbox.intersection_area(&b.bbox), 0.0);
            }
        }
    }
}
