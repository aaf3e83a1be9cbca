//! Incremental task protocols.
//!
//! A task's training set holds every image with at least one object from the
//! task's classes; only those objects stay annotated. Objects of earlier or
//! later classes remain in the pixels unlabelled, which is what produces the
//! background shift that incremental detectors must cope with.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::{ClassMap, DatasetManifest};
use crate::error::{Error, Result};
use crate::geometry::{Annotation, ClassId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task index.
    pub index: usize,
    pub classes: Vec<ClassId>,
}

impl TaskSpec {
    pub fn contains(&self, class: ClassId) -> bool {
        self.classes.contains(&class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub name: String,
    pub tasks: Vec<TaskSpec>,
}

impl ProtocolPlan {
    /// Builds a plan from explicit class groups, validating disjointness.
    pub fn from_groups(name: impl Into<String>, groups: Vec<Vec<ClassId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for class in groups.iter().flatten() {
            if class.is_background() {
                return Err(Error::invalid("background id in a task class set"));
            }
            if !seen.insert(*class) {
                return Err(Error::invalid(format!("class {class} appears in two tasks")));
            }
        }
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every task needs at least one class"));
        }
        let tasks = groups
            .into_iter()
            .enumerate()
            .map(|(i, classes)| TaskSpec {
                index: i + 1,
                classes,
            })
            .collect();
        Ok(Self {
            name: name.into(),
            tasks,
        })
    }

    /// Parses `"A-B"`: the first `A` classes (by id), then tasks of `B` classes
    /// until all `num_classes` are used.
    pub fn parse(spec: &str, num_classes: usize) -> Result<Self> {
        let bad = || Error::invalid(format!("protocol `{spec}` is not of the form A-B"));
        let (a, b) = spec.split_once('-').ok_or_else(bad)?;
        let first: usize = a.trim().parse().map_err(|_| bad())?;
        let step: usize = b.trim().parse().map_err(|_| bad())?;
        if first == 0 || step == 0 || first >= num_classes {
            return Err(Error::invalid(format!(
                "protocol `{spec}` does not fit {num_classes} classes"
            )));
        }
        if (num_classes - first) % step != 0 {
            return Err(Error::invalid(format!(
                "protocol `{spec}`: {} remaining classes are not a multiple of {step}",
                num_classes - first
            )));
        }
        let ids: Vec<ClassId> = (1..=num_classes as u32).map(ClassId).collect();
        let mut groups = vec![ids[..first].to_vec()];
        groups.extend(ids[first..].chunks(step).map(<[ClassId]>::to_vec));
        Self::from_groups(spec, groups)
    }

    /// Parses a class-list document: one task per line, class names separated
    /// by commas or whitespace; `#` starts a comment.
    pub fn parse_class_lists(text: &str, classes: &ClassMap, name: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let group = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|n| classes.id(n).ok_or_else(|| Error::UnknownClass(n.to_string())))
                .collect::<Result<Vec<_>>>()?;
            groups.push(group);
        }
        Self::from_groups(name, groups)
    }

    pub fn read_class_lists(path: &Path, classes: &ClassMap) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse_class_lists(&text, classes, &name)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Classes of tasks `1..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<ClassId> {
        self.tasks
            .iter()
            .take(t)
            .flat_map(|s| s.classes.iter().copied())
            .collect()
    }

    /// Classes of tasks `1..t` (strictly before `t`).
    pub fn old_classes(&self, t: usize) -> Vec<ClassId> {
        self.seen_classes(t.saturating_sub(1))
    }

    pub fn task(&self, t: usize) -> Option<&TaskSpec> {
        self.tasks.get(t.wrapping_sub(1))
    }
}

/// One training image of a task with its visible (current-class) annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    /// Index into the manifest.
    pub entry: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub samples: Vec<TaskSample>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits a manifest into per-task training sets following the plan.
pub fn split_tasks(manifest: &DatasetManifest, plan: &ProtocolPlan) -> Result<Vec<TaskData>> {
    let known: BTreeSet<ClassId> = manifest.classes.ids().collect();
    if let Some(missing) = plan.all_classes().into_iter().find(|c| !known.contains(c)) {
        return Err(Error::invalid(format!(
            "protocol `{}` references class {missing} absent from the manifest",
            plan.name
        )));
    }
    Ok(plan
        .tasks
        .iter()
        .map(|spec| {
            let samples = manifest
                .entries
                .iter()
                .enumerate()
                .filter_map(|(i, e)| {
                    let visible: Vec<Annotation> = e
                        .objects
                        .iter()
                        .filter(|a| spec.contains(a.class_id))
                        .copied()
                        .collect();
                    (!visible.is_empty()).then_some(TaskSample {
                        entry: i,
                        annotations: visible,
                    })
                })
                .collect();
            TaskData {
                spec: spec.clone(),
                samples,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestEntry;
    use crate::geometry::BoundingBox;

    fn ann(c: u32) -> Annotation {
        Annotation::new(BoundingBox::new(1.0, 1.0, 4.0, 4.0).unwrap(), ClassId(c))
    }

    fn manifest(images: &[&[u32]]) -> DatasetManifest {
        DatasetManifest {
            classes: ClassMap::from_names_sorted(["a", "b", "c", "d"]),
            entries: images
                .iter()
                .enumerate()
                .map(|(i, cs)| ManifestEntry {
                    image: format!("{i}.png"),
                    width: 10,
                    height: 10,
                    objects: cs.iter().map(|&c| ann(c)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn parse_a_b() {
        let p = ProtocolPlan::parse("10-5", 20).unwrap();
        assert_eq!(p.num_tasks(), 3);
        assert_eq!(p.tasks[0].classes.len(), 10);
        assert_eq!(p.tasks[2].classes, (16..=20).map(ClassId).collect::<Vec<_>>());
        assert_eq!(ProtocolPlan::parse("19-1", 20).unwrap().num_tasks(), 2);
        assert_eq!(ProtocolPlan::parse("10-1", 20).unwrap().num_tasks(), 11);
        assert!(ProtocolPlan::parse("10-3", 20).is_err());
        assert!(ProtocolPlan::parse("20-1", 20).is_err());
        assert!(ProtocolPlan::parse("ten", 20).is_err());
    }

    #[test]
    fn class_list_file() {
        let classes = ClassMap::from_names_sorted(["a", "b", "c"]);
        let p = ProtocolPlan::parse_class_lists("# first\nc, a\n\nb\n", &classes, "x").unwrap();
        assert_eq!(p.tasks[0].classes, vec![ClassId(3), ClassId(1)]);
        assert_eq!(p.tasks[1].index, 2);
        assert!(ProtocolPlan::parse_class_lists("a\na\n", &classes, "x").is_err());
        assert!(ProtocolPlan::parse_class_lists("zebra\n", &classes, "x").is_err());
    }

    #[test]
    fn image_visible_in_both_tasks_with_masking() {
        let m = manifest(&[&[1, 3]]);
        let plan = ProtocolPlan::parse("2-2", 4).unwrap();
        let tasks = split_tasks(&m, &plan).unwrap();
        assert_eq!(tasks[0].samples[0].annotations, vec![ann(1)]);
        assert_eq!(tasks[1].samples[0].annotations, vec![ann(3)]);
    }

    #[test]
    fn image_absent_from_later_task() {
        let m = manifest(&[&[1, 2]]);
        let tasks = split_tasks(&m, &ProtocolPlan::parse("2-2", 4).unwrap()).unwrap();
        assert_eq!(tasks[0].len(), 1);
        assert!(tasks[1].is_empty());
    }

    #[test]
    fn absent_class_rejected() {
        let m = manifest(&[&[1]]);
        let plan = ProtocolPlan::from_groups("x", vec![vec![ClassId(1)], vec![ClassId(9)]]).unwrap();
        assert!(split_tasks(&m, &plan).is_err());
    }

    #[test]
    fn seen_and_old() {
        let p = ProtocolPlan::parse("2-1", 4).unwrap();
        assert_eq!(p.seen_classes(2), vec![ClassId(1), ClassId(2), ClassId(3)]);
        assert_eq!(p.old_classes(2), vec![ClassId(1), ClassId(2)]);
        assert!(p.old_classes(1).is_empty());
    }
}
