//! Fixed-capacity rehearsal memory of object crops.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSource, TaskData};
use crate::detector::features::FeatureMap;
use crate::detector::model::DetectionModel;
use crate::error::{Error, Result};
use crate::geometry::{crop, BoundingBox, ClassId, Image};

/// Smallest usable crop side, in pixels.
pub const MIN_CROP_SIDE: usize = 8;

pub const BUFFER_FORMAT: &str = "abr-buffer/1";

#[derive(Debug, Clone, PartialEq)]
pub struct BoxExemplar {
    pub pixels: Image,
    pub class_id: ClassId,
    pub source_image: usize,
    /// Box in the source image the crop was taken from.
    pub source_box: BoundingBox,
    pub distance: f64,
}

impl BoxExemplar {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    fn sort_key(&self) -> (f64, usize, [f32; 4]) {
        (self.distance, self.source_image, self.source_box.corners())
    }
}

fn cmp_exemplars(a: &BoxExemplar, b: &BoxExemplar) -> std::cmp::Ordering {
    let (da, ia, ba) = a.sort_key();
    let (db, ib, bb) = b.sort_key();
    da.total_cmp(&db).then(ia.cmp(&ib)).then_with(|| {
        ba.iter()
            .zip(&bb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// `ceil(capacity / seen)`.
pub fn quota(capacity: usize, seen: usize) -> Result<usize> {
    if seen == 0 {
        return Err(Error::invalid("quota needs at least one seen class"));
    }
    Ok(capacity.div_ceil(seen))
}

/// Share of class number `rank` (0-based, in seen order) when `capacity`
/// is split over `seen` classes. The first `capacity % seen` classes get the
/// full quota and the rest one less, so shares sum to `capacity` exactly.
pub fn class_share(capacity: usize, seen: usize, rank: usize) -> Result<usize> {
    let q = quota(capacity, seen)?;
    let extra = capacity % seen;
    Ok(if extra == 0 || rank < extra { q } else { q - 1 })
}

/// Element-wise mean of same-shaped feature maps.
pub fn class_prototype(features: &[FeatureMap]) -> Result<FeatureMap> {
    let first = features.first().ok_or_else(|| Error::Empty("no feature maps for prototype".into()))?;
    let mut acc = vec![0.0f64; first.values().len()];
    for f in features {
        if !f.same_shape(first) {
            return Err(Error::Shape("prototype inputs differ in shape".into()));
        }
        for (a, v) in acc.iter_mut().zip(f.values()) {
            *a += v;
        }
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureMap::new(first.channels(), first.size(), acc)
}

/// Euclidean distance over all elements.
pub fn feature_distance(f: &FeatureMap, prototype: &FeatureMap) -> Result<f64> {
    if !f.same_shape(prototype) {
        return Err(Error::Shape("feature and prototype differ in shape".into()));
    }
    Ok(f.values()
        .iter()
        .zip(prototype.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Anything that can pool features for boxes of an image.
pub trait RoiFeatureExtractor {
    fn roi_features(&self, image: &Image, boxes: &[BoundingBox]) -> Vec<FeatureMap>;
}

impl RoiFeatureExtractor for DetectionModel {
    fn roi_features(&self, image: &Image, boxes: &[BoundingBox]) -> Vec<FeatureMap> {
        let (f, _) = self.backbone_forward(image);
        self.roi_features(&f, boxes)
    }
}

/// How new-class exemplars are chosen. Only `Prototype` is the supported
/// default; the others exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    #[default]
    Prototype,
    Herding,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxBuffer {
    pub capacity: usize,
    pub seen_classes: Vec<ClassId>,
    classes: BTreeMap<ClassId, Vec<BoxExemplar>>,
}

/// Indices kept when an old class shrinks from `stored` exemplars to
/// `new_quota`, given the quota `previous_quota` it was filled under:
/// `i_j = j * stored / previous_quota` for `j = 1..=new_quota`, clamped to
/// the last index and deduplicated. Classes already within quota are kept
/// whole.
pub fn strided_indices(stored: usize, previous_quota: usize, new_quota: usize) -> Vec<usize> {
    if stored <= new_quota {
        return (0..stored).collect();
    }
    let mut out: Vec<usize> = (1..=new_quota)
        .map(|j| (j * stored / previous_quota.max(1)).min(stored - 1))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub capacity: usize,
    pub total: usize,
    pub per_class: BTreeMap<ClassId, usize>,
    /// Counts of crops whose longer side falls in `[8,16)`, `[16,32)`,
    /// `[32,64)`, `[64,inf)`.
    pub size_histogram: [usize; 4],
    /// Bytes as 8-bit RGB.
    pub total_bytes: usize,
}

impl BufferStats {
    pub fn render(&self) -> String {
        let mut s = format!("capacity {}  stored {}  bytes {}\n", self.capacity, self.total, self.total_bytes);
        for (c, n) in &self.per_class {
            s.push_str(&format!("  class {:>3}: {n}\n", c.0));
        }
        let labels = ["8-15", "16-31", "32-63", "64+"];
        s.push_str("  longer side:");
        for (l, n) in labels.iter().zip(self.size_histogram) {
            s.push_str(&format!(" {l}:{n}"));
        }
        s.push('\n');
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    capacity: usize,
    seen_classes: Vec<ClassId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    file: String,
    class: ClassId,
    source_image: usize,
    w: usize,
    h: usize,
    distance: f64,
    #[serde(rename = "box")]
    source_box: BoundingBox,
}

impl BoxBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, c: ClassId) -> &[BoxExemplar] {
        self.classes.get(&c).map_or(&[], Vec::as_slice)
    }

    pub fn stored_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BoxExemplar> {
        self.classes.values().flatten()
    }

    /// Replaces one class list, sorting it by distance.
    pub fn set_class(&mut self, c: ClassId, mut exemplars: Vec<BoxExemplar>) {
        exemplars.sort_by(cmp_exemplars);
        self.classes.insert(c, exemplars);
    }

    /// `k` exemplars drawn uniformly without replacement; all of them,
    /// shuffled, when `k` exceeds the stored count.
    pub fn sample_boxes(&self, k: usize, rng: &mut impl Rng) -> Vec<BoxExemplar> {
        let all: Vec<&BoxExemplar> = self.iter().collect();
        let k = k.min(all.len());
        rand::seq::index::sample(rng, all.len(), k)
            .into_iter()
            .map(|i| all[i].clone())
            .collect()
    }

    pub fn stats(&self) -> BufferStats {
        let mut hist = [0usize; 4];
        for e in self.iter() {
            let side = e.width().max(e.height());
            let bin = match side {
                0..16 => 0,
                16..32 => 1,
                32..64 => 2,
                _ => 3,
            };
            hist[bin] += 1;
        }
        BufferStats {
            capacity: self.capacity,
            total: self.len(),
            per_class: self.classes.iter().map(|(c, v)| (*c, v.len())).collect(),
            size_histogram: hist,
            total_bytes: self.iter().map(|e| e.pixels.byte_size()).sum(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("crops")).map_err(|e| Error::io(dir, e))?;
        let mut lines = vec![serde_json::to_string(&Header {
            format: BUFFER_FORMAT.into(),
            capacity: self.capacity,
            seen_classes: self.seen_classes.clone(),
        })?];
        for (i, e) in self.iter().enumerate() {
            let file = format!("crops/{i:05}.png");
            e.pixels.save_png(&dir.join(&file))?;
            lines.push(serde_json::to_string(&Record {
                file,
                class: e.class_id,
                source_image: e.source_image,
                w: e.width(),
                h: e.height(),
                distance: e.distance,
                source_box: e.source_box,
            })?);
        }
        let path = dir.join("manifest.jsonl");
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.clone(),
            message,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| parse_err("missing header".into()))?)
            .map_err(|e| parse_err(e.to_string()))?;
        if header.format != BUFFER_FORMAT {
            return Err(Error::Format {
                found: header.format,
                expected: BUFFER_FORMAT.into(),
            });
        }
        let mut buf = BoxBuffer::new(header.capacity);
        buf.seen_classes = header.seen_classes;
        let mut per_class: BTreeMap<ClassId, Vec<BoxExemplar>> = BTreeMap::new();
        for line in lines {
            let r: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let pixels = Image::load(&dir.join(&r.file))?;
            if (pixels.width(), pixels.height()) != (r.w, r.h) {
                return Err(parse_err(format!("{} is {}x{}, record says {}x{}", r.file, pixels.width(), pixels.height(), r.w, r.h)));
            }
            per_class.entry(r.class).or_default().push(BoxExemplar {
                pixels,
                class_id: r.class,
                source_image: r.source_image,
                source_box: r.source_box,
                distance: r.distance,
            });
        }
        for (c, v) in per_class {
            buf.set_class(c, v);
        }
        Ok(buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectionOptions {
    pub strategy: SelectionStrategy,
    /// Only used by the random strategy.
    pub seed: u64,
}

/// Buffer update after training on `task`. New classes get their crops
/// nearest to the class prototype (mean pooled feature under the frozen
/// `extractor`); old classes are thinned to the new quota.
pub fn select_prototype_boxes<E, S>(
    task: &TaskData,
    images: &S,
    extractor: &E,
    previous: &BoxBuffer,
    seen: &[ClassId],
    options: SelectionOptions,
) -> Result<BoxBuffer>
where
    E: RoiFeatureExtractor + ?Sized,
    S: ImageSource + ?Sized,
{
    let m_t = quota(previous.capacity, seen.len())?;
    let mut next = BoxBuffer::new(previous.capacity);
    next.seen_classes = seen.to_vec();
    let mut order = seen.to_vec();
    order.sort();
    let share = |c: ClassId| -> Result<usize> {
        let rank = order.iter().position(|&s| s == c).unwrap_or(order.len() - 1);
        class_share(previous.capacity, order.len(), rank)
    };

    if !previous.seen_classes.is_empty() {
        let q_prev = quota(previous.capacity, previous.seen_classes.len())?;
        for c in previous.stored_classes() {
            let old = previous.class(c);
            let kept = strided_indices(old.len(), q_prev, share(c)?)
                .into_iter()
                .map(|i| old[i].clone())
                .collect();
            next.set_class(c, kept);
        }
    }
    if m_t == 0 {
        return Ok(next);
    }

    let mut candidates: BTreeMap<ClassId, Vec<(BoxExemplar, FeatureMap)>> = BTreeMap::new();
    for sample in &task.samples {
        let boxes: Vec<_> = sample
            .annotations
            .iter()
            .filter(|a| task.spec.contains(a.class_id))
            .collect();
        if boxes.is_empty() {
            continue;
        }
        let image = images.image(sample.entry)?;
        let feats = extractor.roi_features(&image, &boxes.iter().map(|a| a.bbox).collect::<Vec<_>>());
        for (a, f) in boxes.iter().zip(feats) {
            let pixels = crop(&image, &a.bbox)?;
            if pixels.width() < MIN_CROP_SIDE || pixels.height() < MIN_CROP_SIDE {
                continue;
            }
            candidates.entry(a.class_id).or_default().push((
                BoxExemplar {
                    pixels,
                    class_id: a.class_id,
                    source_image: sample.entry,
                    source_box: a.bbox,
                    distance: 0.0,
                },
                f,
            ));
        }
    }

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(options.seed);
    for &c in &task.spec.classes {
        let Some(mut list) = candidates.remove(&c) else {
            log::warn!("class {} has no usable boxes; its buffer list stays empty", c.0);
            next.set_class(c, Vec::new());
            continue;
        };
        // fixed summation order keeps the prototype independent of input order
        list.sort_by(|a, b| cmp_exemplars(&a.0, &b.0));
        let feats: Vec<FeatureMap> = list.iter().map(|(_, f)| f.clone()).collect();
        let proto = class_prototype(&feats)?;
        for (e, f) in &mut list {
            e.distance = feature_distance(f, &proto)?;
        }
        list.sort_by(|a, b| cmp_exemplars(&a.0, &b.0));
        let m_c = share(c)?;
        let kept: Vec<BoxExemplar> = match options.strategy {
            SelectionStrategy::Prototype => list.into_iter().take(m_c).map(|(e, _)| e).collect(),
            SelectionStrategy::Random => {
                list.shuffle(&mut rng);
                list.into_iter().take(m_c).map(|(e, _)| e).collect()
            }
            SelectionStrategy::Herding => herding(list, &proto, m_c)?,
        };
        next.set_class(c, kept);
    }
    Ok(next)
}

/// Greedy herding: repeatedly adds the crop that keeps the running feature
/// mean closest to the prototype.
fn herding(list: Vec<(BoxExemplar, FeatureMap)>, proto: &FeatureMap, k: usize) -> Result<Vec<BoxExemplar>> {
    let n = proto.values().len();
    let mut sum = vec![0.0f64; n];
    let mut remaining = list;
    let mut chosen = Vec::new();
    while chosen.len() < k && !remaining.is_empty() {
        let m = (chosen.len() + 1) as f64;
        let mut best = (f64::INFINITY, 0usize);
        for (i, (_, f)) in remaining.iter().enumerate() {
            let d: f64 = (0..n)
                .map(|j| {
                    let v = (sum[j] + f.values()[j]) / m - proto.values()[j];
                    v * v
                })
                .sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        let (e, f) = remaining.remove(best.1);
        for (s, v) in sum.iter_mut().zip(f.values()) {
            *s += v;
        }
        chosen.push(e);
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(values: Vec<f64>) -> FeatureMap {
        FeatureMap::new(1, 1, values).unwrap()
    }

    fn exemplar(class: u32, distance: f64, source: usize) -> BoxExemplar {
        BoxExemplar {
            pixels: Image::filled(8, 8, 128.0 / 255.0),
            class_id: ClassId(class),
            source_image: source,
            source_box: BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            distance,
        }
    }

    #[test]
    fn quota_cases() {
        assert_eq!(quota(2000, 10).unwrap(), 200);
        assert_eq!(quota(2000, 20).unwrap(), 100);
        assert_eq!(quota(10, 3).unwrap(), 4);
        assert!(quota(10, 0).is_err());
        let shares: Vec<usize> = (0..3).map(|r| class_share(10, 3, r).unwrap()).collect();
        assert_eq!(shares, [4, 3, 3]);
        assert_eq!(class_share(1, 2, 1).unwrap(), 0);
        assert_eq!(class_share(120, 8, 7).unwrap(), 15);
    }

    #[test]
    fn prototype_and_distance() {
        let f = FeatureMap::new(1, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let neg = FeatureMap::new(1, 2, f.values().iter().map(|v| -v).collect()).unwrap();
        assert_eq!(class_prototype(std::slice::from_ref(&f)).unwrap(), f);
        assert!(class_prototype(&[f.clone(), neg]).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(class_prototype(&[]).is_err());
        assert_eq!(feature_distance(&f, &f).unwrap(), 0.0);
        let mut g = f.clone();
        g.values_mut()[2] += 3.0;
        assert_eq!(feature_distance(&g, &f).unwrap(), 3.0);
        assert!(feature_distance(&fm(vec![0.0]), &f).is_err());
    }

    #[test]
    fn strided_formula() {
        assert_eq!(strided_indices(200, 200, 100), (1..=100).collect::<Vec<_>>());
        assert_eq!(strided_indices(3, 10, 5), vec![0, 1, 2]);
        let idx = strided_indices(30, 30, 30);
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
        let idx = strided_indices(40, 30, 20);
        assert_eq!(idx.len(), 20);
        assert!(idx.windows(2).all(|w| w[0] < w[1]) && *idx.last().unwrap() < 40);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut b = BoxBuffer::new(10);
        b.set_class(ClassId(1), (0..5).map(|i| exemplar(1, i as f64, i)).collect());
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(b.sample_boxes(3, &mut r1), b.clone().sample_boxes(3, &mut r2));
        assert!(b.sample_boxes(0, &mut r1).is_empty());
        let mut all: Vec<usize> = b.sample_boxes(99, &mut r1).iter().map(|e| e.source_image).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn lists_sorted_with_deterministic_ties() {
        let mut b = BoxBuffer::new(10);
        b.set_class(ClassId(2), vec![exemplar(2, 1.0, 5), exemplar(2, 0.5, 9), exemplar(2, 1.0, 3)]);
        let order: Vec<usize> = b.class(ClassId(2)).iter().map(|e| e.source_image).collect();
        assert_eq!(order, vec![9, 3, 5]);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut b = BoxBuffer::new(6);
        b.seen_classes = vec![ClassId(1), ClassId(2)];
        b.set_class(ClassId(1), vec![exemplar(1, 0.25, 0)]);
        b.set_class(ClassId(2), vec![exemplar(2, 0.5, 1), exemplar(2, 0.75, 2)]);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = BoxBuffer::load(dir.path()).unwrap();
        assert!(back == b, "buffer changed on disk roundtrip");
        assert_eq!(back.stats().total_bytes, 3 * 8 * 8 * 3);
    }
}
