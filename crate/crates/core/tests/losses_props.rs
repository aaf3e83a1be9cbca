use abr::detector::{attention_map, FeatureMap};
use abr::losses::{
    afd_loss, afd_loss_grad, ard_loss, ard_loss_grad, inclusive_classification_loss, inclusive_classification_with_grad,
    inclusive_distillation_loss, inclusive_distillation_with_grad, pad_loss, pad_loss_grad, softmax, ClassPartition,
    ProposalPairBatch,
};
use abr::BoundingBox;
use proptest::prelude::*;

const C: usize = 4;
const S: usize = 3;

fn features(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, C * S * S), n)
}

fn batch_of(student: &[Vec<f64>], teacher: &[Vec<f64>], c: usize, p: f64) -> ProposalPairBatch {
    let maps = |v: &[Vec<f64>]| v.iter().map(|x| FeatureMap::new(c, S, x.clone()).unwrap()).collect::<Vec<_>>();
    let boxes = vec![BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap(); student.len()];
    ProposalPairBatch::new(boxes, maps(student), maps(teacher), p).unwrap()
}

fn probs(width: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.02f64..1.0, width).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

/// Central differences of `f` over every coordinate of `x`.
fn numeric_grad(x: &[Vec<f64>], f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    let h = 1e-3;
    let mut out = Vec::new();
    for i in 0..x.len() {
        for j in 0..x[i].len() {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i][j] += h;
            down[i][j] -= h;
            out.push((f(&up) - f(&down)) / (2.0 * h));
        }
    }
    out
}

fn partition_and_labels() -> impl Strategy<Value = (ClassPartition, Vec<usize>)> {
    (1usize..4, 1usize..4).prop_flat_map(|(old, new)| {
        let part = ClassPartition { old, new };
        (Just(part), prop::collection::vec(prop_oneof![Just(0usize), 1..part.width()], 3))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distillation_losses_non_negative(s in features(3), t in features(3), gamma in 0.0f64..3.0) {
        let b = batch_of(&s, &t, C, 2.0);
        prop_assert!(pad_loss(&b) >= 0.0);
        prop_assert!(afd_loss(&b) >= 0.0);
        prop_assert!(ard_loss(&b, gamma) >= 0.0);
    }

    #[test]
    fn zero_at_identity(t in features(3)) {
        let b = batch_of(&t, &t, C, 2.0);
        prop_assert_eq!(pad_loss(&b), 0.0);
        prop_assert_eq!(afd_loss(&b), 0.0);
    }

    #[test]
    fn ic_non_negative((part, labels) in partition_and_labels(), seed in any::<u64>()) {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| {
            let raw: Vec<f64> = (0..part.width()).map(|j| 0.05 + ((seed >> ((i * 7 + j) % 60)) & 15) as f64).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        }).collect();
        prop_assert!(inclusive_classification_loss(&rows, &labels, part).unwrap() >= 0.0);
    }

    #[test]
    fn feature_gradients_match_finite_differences(s in features(3), t in features(3), gamma in 0.1f64..2.0) {
        let b = batch_of(&s, &t, C, 2.0);
        let checks: [(&str, Vec<Vec<f64>>, Box<dyn Fn(&ProposalPairBatch) -> f64>); 3] = [
            ("pad", pad_loss_grad(&b), Box::new(pad_loss)),
            ("afd", afd_loss_grad(&b), Box::new(afd_loss)),
            ("ard", ard_loss_grad(&b, gamma), Box::new(move |b: &ProposalPairBatch| ard_loss(b, gamma))),
        ];
        for (name, analytic, loss) in checks {
            let numeric = numeric_grad(&s, |x| loss(&batch_of(x, &t, C, 2.0)));
            let flat: Vec<f64> = analytic.concat();
            let e = rel_err(&flat, &numeric);
            prop_assert!(e < 1e-4, "{} gradient rel err {}", name, e);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences(
        (part, labels) in partition_and_labels(),
        logits in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 7), 3),
        teacher in prop::collection::vec(probs(4), 3),
    ) {
        let z: Vec<Vec<f64>> = logits.iter().map(|r| r[..part.width()].to_vec()).collect();
        let t: Vec<Vec<f64>> = teacher.iter().map(|r| {
            let r = &r[..1 + part.old];
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        }).collect();
        let probs_of = |z: &[Vec<f64>]| z.iter().map(|r| softmax(r)).collect::<Vec<_>>();

        let (ic, g) = inclusive_classification_with_grad(&z, &labels, part).unwrap();
        let ic_ref = inclusive_classification_loss(&probs_of(&z), &labels, part).unwrap();
        prop_assert!((ic - ic_ref).abs() < 1e-9);
        let numeric = numeric_grad(&z, |x| inclusive_classification_loss(&probs_of(x), &labels, part).unwrap());
        prop_assert!(rel_err(&g.concat(), &numeric) < 1e-4);

        let (id, g) = inclusive_distillation_with_grad(&t, &z, &labels, part).unwrap();
        let id_ref = inclusive_distillation_loss(&t, &probs_of(&z), &labels, part).unwrap();
        prop_assert!((id - id_ref).abs() < 1e-9);
        let numeric = numeric_grad(&z, |x| inclusive_distillation_loss(&t, &probs_of(x), &labels, part).unwrap());
        prop_assert!(rel_err(&g.concat(), &numeric) < 1e-4);
    }

    #[test]
    fn afd_channel_duplication_only_rescales_attention(s in features(3), t in features(3)) {
        let dup = |v: &[Vec<f64>]| v.iter().map(|x| [x.as_slice(), x.as_slice()].concat()).collect::<Vec<_>>();
        let once = afd_loss(&batch_of(&s, &t, C, 2.0));
        let twice = afd_loss(&batch_of(&dup(&s), &dup(&t), 2 * C, 2.0));
        // the attention weight doubles with the channel count
        prop_assert!((twice - 2.0 * once).abs() <= 1e-9 * once.abs().max(1.0));
    }

    #[test]
    fn background_absorbs_old_class_mass(
        (part, _) in partition_and_labels(),
        row in probs(7),
        shift in 0.0f64..1.0,
    ) {
        let row: Vec<f64> = {
            let r = &row[..part.width()];
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        };
        let moved = shift * row[0];
        let mut other = row.clone();
        other[0] -= moved;
        for c in part.old_columns() {
            other[c] += moved / part.old as f64;
        }
        let a = inclusive_classification_loss(&[row], &[0], part).unwrap();
        let b = inclusive_classification_loss(&[other], &[0], part).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn attention_channel_permutation(s in features(1), perm in Just((0..C).collect::<Vec<_>>()).prop_shuffle(), p in 0.5f64..3.0) {
        let f = FeatureMap::new(C, S, s[0].clone()).unwrap();
        let shuffled: Vec<f64> = perm.iter().flat_map(|&d| s[0][d * S * S..(d + 1) * S * S].to_vec()).collect();
        let g = FeatureMap::new(C, S, shuffled).unwrap();
        let (a, b) = (attention_map(&f, p).unwrap(), attention_map(&g, p).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn attention_homogeneity(s in features(1), k in -3.0f64..3.0, p in 0.5f64..3.0) {
        let f = FeatureMap::new(C, S, s[0].clone()).unwrap();
        let g = FeatureMap::new(C, S, s[0].iter().map(|v| k * v).collect()).unwrap();
        let (a, b) = (attention_map(&f, p).unwrap(), attention_map(&g, p).unwrap());
        let scale = k.abs().powf(p);
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((scale * x - y).abs() <= 1e-9 * y.abs().max(1e-6));
        }
    }
}
