use std::collections::BTreeSet;

use abr::data::{split_tasks, ClassMap, DatasetManifest, ManifestEntry, ProtocolPlan};
use abr::{Annotation, BoundingBox, ClassId};
use proptest::prelude::*;

fn manifest(objects: Vec<Vec<(u32, u8)>>, classes: usize) -> DatasetManifest {
    DatasetManifest {
        classes: ClassMap::new((1..=classes).map(|c| format!("c{c:02}")).collect()).unwrap(),
        entries: objects
            .into_iter()
            .enumerate()
            .map(|(i, objs)| ManifestEntry {
                image: format!("img{i}.png"),
                width: 64,
                height: 64,
                objects: objs
                    .into_iter()
                    .map(|(c, slot)| {
                        let b = BoundingBox::new(4.0 * slot as f32, 4.0 * slot as f32, 8.0, 8.0).unwrap();
                        Annotation::new(b, ClassId(c))
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn scenario() -> impl Strategy<Value = (DatasetManifest, ProtocolPlan)> {
    (1usize..4, 1usize..3, 1usize..4).prop_flat_map(|(first, step, rest)| {
        let classes = first + step * rest;
        let objs = prop::collection::vec(prop::collection::vec((1..=classes as u32, 0u8..12), 0..5), 1..25);
        objs.prop_filter_map("every class present", move |objs| {
            let present: BTreeSet<u32> = objs.iter().flatten().map(|&(c, _)| c).collect();
            (present.len() == classes).then(|| {
                let plan = ProtocolPlan::parse(&format!("{first}-{step}"), classes).unwrap();
                (manifest(objs, classes), plan)
            })
        })
    })
}

proptest! {
    #[test]
    fn visible_annotations_belong_to_the_task((m, plan) in scenario()) {
        for t in split_tasks(&m, &plan).unwrap() {
            for s in &t.samples {
                prop_assert!(!s.annotations.is_empty());
                for a in &s.annotations {
                    prop_assert!(t.spec.contains(a.class_id));
                }
            }
        }
    }

    #[test]
    fn tasks_cover_the_manifest((m, plan) in scenario()) {
        let key = |e: usize, a: &Annotation| (e, a.bbox.corners().map(f32::to_bits), a.class_id);
        let mut union = BTreeSet::new();
        for t in split_tasks(&m, &plan).unwrap() {
            for s in &t.samples {
                union.extend(s.annotations.iter().map(|a| key(s.entry, a)));
            }
        }
        let all: BTreeSet<_> = plan.all_classes().into_iter().collect();
        let want: BTreeSet<_> = m
            .entries
            .iter()
            .enumerate()
            .flat_map(|(e, entry)| entry.objects.iter().filter(|a| all.contains(&a.class_id)).map(move |a| key(e, a)))
            .collect();
        prop_assert_eq!(union, want);
    }
}
