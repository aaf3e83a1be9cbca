//! Detection metrics: per-class AP, grouped mAP and background false
//! positives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: usize,
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// The ten COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-detection outcome after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Greedy matching in descending confidence order. Each detection takes the
/// highest-IoU groundtruth of its image that is still available; a match on
/// a difficult object is ignored rather than scored.
fn match_detections(dets: &[&DetectionResult], gts: &[&GroundTruth], threshold: f64) -> Vec<Outcome> {
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id).or_default().push(g);
    }
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(f64, usize)> = None;
        for &g in by_image.get(&d.image_id).map_or(&[][..], |v| v.as_slice()) {
            if used[g] && !gts[g].difficult {
                continue;
            }
            let o = iou(&d.bbox, &gts[g].bbox) as f64;
            if o >= threshold && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, g));
            }
        }
        out.push(match best {
            Some((_, g)) if gts[g].difficult => Outcome::Ignored,
            Some((_, g)) => {
                used[g] = true;
                Outcome::Tp
            }
            None => Outcome::Fp,
        });
    }
    out
}

fn sort_by_confidence(dets: &[DetectionResult]) -> Vec<&DetectionResult> {
    let mut sorted: Vec<&DetectionResult> = dets.iter().collect();
    // stable: equal confidences keep input order
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    sorted
}

/// Precision/recall points after each scored detection.
pub fn precision_recall(dets: &[DetectionResult], gts: &[GroundTruth], threshold: f64) -> Vec<(f64, f64)> {
    let sorted = sort_by_confidence(dets);
    let gts: Vec<&GroundTruth> = gts.iter().collect();
    let npos = gts.iter().filter(|g| !g.difficult).count();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut out = Vec::new();
    for o in match_detections(&sorted, &gts, threshold) {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        let recall = if npos == 0 { 0.0 } else { tp as f64 / npos as f64 };
        out.push((recall, tp as f64 / (tp + fp) as f64));
    }
    out
}

/// AP of one class. `None` when there is nothing to score (no groundtruth
/// and no detections); 0 when there are detections but no groundtruth.
pub fn average_precision(
    dets: &[DetectionResult],
    gts: &[GroundTruth],
    threshold: f64,
    interpolation: Interpolation,
) -> Option<f64> {
    let npos = gts.iter().filter(|g| !g.difficult).count();
    if npos == 0 {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let pr = precision_recall(dets, gts, threshold);
    Some(match interpolation {
        Interpolation::AllPoint => {
            let mut recall = vec![0.0];
            let mut precision = vec![0.0];
            for &(r, p) in &pr {
                recall.push(r);
                precision.push(p);
            }
            recall.push(1.0);
            precision.push(0.0);
            for i in (0..precision.len() - 1).rev() {
                precision[i] = precision[i].max(precision[i + 1]);
            }
            (1..recall.len())
                .map(|i| (recall[i] - recall[i - 1]) * precision[i])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    pr.iter().filter(|(r, _)| *r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Old/new class split of one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub old: Vec<ClassId>,
    pub new: Vec<ClassId>,
}

impl ClassGroups {
    pub fn all(&self) -> Vec<ClassId> {
        let mut v: Vec<ClassId> = self.old.iter().chain(&self.new).copied().collect();
        v.sort();
        v.dedup();
        v
    }

    fn named(&self) -> [(&'static str, Vec<ClassId>); 3] {
        [("old", self.old.clone()), ("new", self.new.clone()), ("all", self.all())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    /// One entry per threshold; `None` when undefined.
    pub ap: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub classes: Vec<ClassId>,
    /// Mean of defined member APs at each threshold.
    pub map: Vec<Option<f64>>,
    /// Mean over all thresholds.
    pub map_mean: Option<f64>,
    pub background_fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub interpolation: Interpolation,
    pub per_class: Vec<ClassAp>,
    /// Keyed by `old`, `new`, `all`; an empty group is absent.
    pub groups: BTreeMap<String, GroupSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn class_ap(&self, class: ClassId, threshold_index: usize) -> Option<f64> {
        self.per_class
            .iter()
            .find(|c| c.class_id == class)
            .and_then(|c| c.ap[threshold_index])
    }

    /// Group mAP at the first threshold (mAP@50 for the default thresholds).
    pub fn group_map(&self, group: &str) -> Option<f64> {
        self.groups.get(group).and_then(|g| g.map[0])
    }

    /// Mean AP over an arbitrary class subset at threshold `threshold_index`.
    pub fn subset_map(&self, classes: &[ClassId], threshold_index: usize) -> Option<f64> {
        mean(classes.iter().filter_map(|&c| self.class_ap(c, threshold_index)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat `(class, threshold, ap)` records.
    pub fn records(&self) -> Vec<(ClassId, f64, Option<f64>)> {
        let mut out = Vec::new();
        for c in &self.per_class {
            for (t, ap) in self.thresholds.iter().zip(&c.ap) {
                out.push((c.class_id, *t, *ap));
            }
        }
        out
    }

    /// Old / new / all columns in percent.
    pub fn render_table(&self, title: &str) -> String {
        let cell = |g: &str| {
            self.group_map(g)
                .map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>7} {:>7} {:>7}", "", "old", "new", "all");
        let _ = writeln!(s, "{:<24} {:>7} {:>7} {:>7}", title, cell("old"), cell("new"), cell("all"));
        s
    }
}

/// Full report at `thresholds` for the given class groups.
pub fn map_report(
    dets: &[DetectionResult],
    gts: &[GroundTruth],
    groups: &ClassGroups,
    thresholds: &[f64],
    interpolation: Interpolation,
    fp: &FpConfig,
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::invalid("no IoU thresholds"));
    }
    for &t in thresholds {
        let k = (t - 0.5) / 0.05;
        if !(-1e-9..=9.0 + 1e-9).contains(&k) || (k - k.round()).abs() > 1e-6 {
            return Err(Error::invalid(format!("IoU threshold {t} is not one of 0.50, 0.55, ..., 0.95")));
        }
    }
    let mut per_class = Vec::new();
    for class in groups.all() {
        let d: Vec<DetectionResult> = dets.iter().filter(|x| x.class_id == class).copied().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|x| x.class_id == class).copied().collect();
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(&d, &g, t, interpolation))
            .collect();
        per_class.push(ClassAp { class_id: class, ap });
    }
    let fp_counts = background_fp_count(dets, gts, groups, fp);
    let mut out = BTreeMap::new();
    for (name, classes) in groups.named() {
        if classes.is_empty() {
            continue;
        }
        let members: Vec<&ClassAp> = per_class.iter().filter(|c| classes.contains(&c.class_id)).collect();
        let map: Vec<Option<f64>> = (0..thresholds.len())
            .map(|t| mean(members.iter().filter_map(|c| c.ap[t])))
            .collect();
        let map_mean = if map.iter().all(Option::is_some) {
            mean(map.iter().flatten().copied())
        } else {
            None
        };
        out.insert(
            name.to_string(),
            GroupSummary {
                classes,
                map,
                map_mean,
                background_fp: fp_counts[name],
            },
        );
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        interpolation,
        per_class,
        groups: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpConfig {
    pub iou_floor: f64,
    pub confidence_floor: f32,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self {
            iou_floor: 0.1,
            confidence_floor: 0.5,
        }
    }
}

/// Confident detections lying on background: their best IoU with any
/// groundtruth of the same class is below the floor. Counted per group.
pub fn background_fp_count(
    dets: &[DetectionResult],
    gts: &[GroundTruth],
    groups: &ClassGroups,
    cfg: &FpConfig,
) -> BTreeMap<&'static str, usize> {
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (name, _) in groups.named() {
        counts.insert(name, 0);
    }
    for d in dets.iter().filter(|d| d.confidence >= cfg.confidence_floor) {
        let best = gts
            .iter()
            .filter(|g| g.image_id == d.image_id && g.class_id == d.class_id)
            .map(|g| iou(&d.bbox, &g.bbox) as f64)
            .fold(0.0, f64::max);
        if best >= cfg.iou_floor {
            continue;
        }
        for (name, classes) in groups.named() {
            if classes.contains(&d.class_id) {
                *counts.get_mut(name).unwrap() += 1;
            }
        }
    }
    counts
}

/// One series of an SVG line plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal SVG line chart; y is drawn in [0, 100].
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| m + (x - x_min) / span * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 100.0) / 100.0 * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for k in 0..=4 {
        let y = 25.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y}</text>"#, m - 4.0, py(y) + 4.0);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), h - m + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = m + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, w - m - 90.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(u: f32) -> BoundingBox {
        BoundingBox::new(u, 0.0, 10.0, 10.0).unwrap()
    }

    fn det(image: usize, u: f32, conf: f32) -> DetectionResult {
        DetectionResult {
            image_id: image,
            class_id: ClassId(1),
            bbox: bx(u),
            confidence: conf,
        }
    }

    fn gt(image: usize, u: f32) -> GroundTruth {
        GroundTruth {
            image_id: image,
            class_id: ClassId(1),
            bbox: bx(u),
            difficult: false,
        }
    }

    #[test]
    fn five_sixths() {
        let gts = [gt(0, 0.0), gt(1, 0.0)];
        let dets = [det(0, 0.0, 0.9), det(0, 50.0, 0.8), det(1, 0.0, 0.7)];
        let ap = average_precision(&dets, &gts, 0.5, Interpolation::AllPoint).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_cases() {
        let gts = [gt(0, 0.0), gt(1, 0.0)];
        let perfect = [det(0, 0.0, 0.9), det(1, 0.0, 0.5)];
        assert_eq!(average_precision(&perfect, &gts, 0.5, Interpolation::AllPoint), Some(1.0));
        assert_eq!(average_precision(&perfect, &gts, 0.5, Interpolation::ElevenPoint), Some(1.0));
        assert_eq!(average_precision(&[], &gts, 0.5, Interpolation::AllPoint), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0.5, Interpolation::AllPoint), None);
        assert_eq!(average_precision(&perfect, &[], 0.5, Interpolation::AllPoint), Some(0.0));
    }

    #[test]
    fn duplicates_count_once() {
        let gts = [gt(0, 0.0)];
        let dets = [det(0, 0.0, 0.9), det(0, 0.5, 0.8)];
        let pr = precision_recall(&dets, &gts, 0.5);
        assert_eq!(pr, vec![(1.0, 1.0), (1.0, 0.5)]);
    }

    #[test]
    fn difficult_objects_are_neutral() {
        let mut hard = gt(0, 30.0);
        hard.difficult = true;
        let gts = [gt(0, 0.0), hard];
        let dets = [det(0, 30.0, 0.95), det(0, 0.0, 0.9)];
        assert_eq!(average_precision(&dets, &gts, 0.5, Interpolation::AllPoint), Some(1.0));
    }

    #[test]
    fn group_means() {
        let mut gts = vec![gt(0, 0.0), gt(1, 0.0)];
        let mut g2 = gt(0, 40.0);
        g2.class_id = ClassId(2);
        gts.push(g2);
        let dets = [det(0, 0.0, 0.9), det(0, 50.0, 0.8), det(1, 0.0, 0.7)];
        let groups = ClassGroups {
            old: vec![ClassId(1)],
            new: vec![ClassId(2)],
        };
        let r = map_report(&dets, &gts, &groups, &[0.5], Interpolation::AllPoint, &FpConfig::default()).unwrap();
        assert!((r.group_map("old").unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.group_map("new"), Some(0.0));
        assert!((r.group_map("all").unwrap() - 5.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.groups["old"].background_fp, 1);
        let only_new = ClassGroups {
            old: vec![],
            new: vec![ClassId(2)],
        };
        let r = map_report(&dets, &gts, &only_new, &[0.5], Interpolation::AllPoint, &FpConfig::default()).unwrap();
        assert!(!r.groups.contains_key("old"));
        assert!(map_report(&dets, &gts, &groups, &[0.52], Interpolation::AllPoint, &FpConfig::default()).is_err());
    }

    #[test]
    fn svg_is_well_formed() {
        let s = line_plot_svg(
            "m",
            "x",
            "y",
            &[Series {
                label: "a<b".into(),
                points: vec![(0.0, 10.0), (40.0, 50.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
    }
}
