//! The miniature two-task forgetting study on the shapes dataset: one shared
//! first-task model per seed, then a fine-tuning branch and one ABR branch per
//! memory size.

use serde::{Deserialize, Serialize};

use crate::data::{generate_shapes_dataset, split_tasks, ProtocolPlan, ShapesDataset};
use crate::error::{Error, Result};
use crate::eval::{line_plot_svg, Series};
use crate::geometry::ClassId;
use crate::trainer::{evaluate, IncrementalLearner, TrainConfig};

/// Fine-tuning: no distillation, no replay, plain cross-entropy.
pub fn fine_tuning_config(base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    c.loss.alpha = 0.0;
    c.loss.beta = 0.0;
    c.loss.inclusive = false;
    c.replay.mixup = false;
    c.replay.mosaic = false;
    c.buffer.capacity = 0;
    c
}

/// Final scores of one second-task branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub label: String,
    pub capacity: usize,
    pub first_task_map: f64,
    pub new_map: f64,
    pub all_map: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// mAP on the first task's classes right after the first task.
    pub initial_map: f64,
    pub fine_tuning: BranchResult,
    /// One branch per memory size, in the requested order.
    pub abr: Vec<BranchResult>,
}

impl SeedResult {
    pub fn abr_at(&self, capacity: usize) -> Option<&BranchResult> {
        self.abr.iter().find(|b| b.capacity == capacity)
    }
}

pub fn shapes_splits(config: &TrainConfig) -> Result<(ShapesDataset, ShapesDataset)> {
    let seed = config.train.seed;
    Ok((
        generate_shapes_dataset(&config.data.shapes(seed, false))?,
        generate_shapes_dataset(&config.data.shapes(seed, true))?,
    ))
}

/// Runs the study for one seed (`base.train.seed` is replaced). `base` is
/// the full ABR configuration; its buffer capacity is overridden per branch.
pub fn run_seed(base: &TrainConfig, seed: u64, capacities: &[usize]) -> Result<SeedResult> {
    let mut base = base.clone();
    base.train.seed = seed;
    base.validate()?;
    let (train, test) = shapes_splits(&base)?;
    let plan = ProtocolPlan::parse(&base.data.protocol, base.data.shapes_classes)?;
    if plan.num_tasks() != 2 {
        return Err(Error::invalid(format!("study needs a two-task protocol, got {}", plan.name)));
    }
    let tasks = split_tasks(&train.manifest, &plan)?;
    let first: Vec<ClassId> = plan.tasks[0].classes.clone();

    let mut root = IncrementalLearner::new(base.clone(), plan.clone());
    root.learn_task(&tasks[0], &train.images, |_| {})?;
    let initial = evaluate(&root.model, &test.manifest, &test.images, &root.groups(1), &base)?;
    let initial_map = initial.group_map("all").unwrap_or(0.0);
    log::info!("seed {seed}: task 1 mAP {:.3}", initial_map);

    let branch = |label: String, config: TrainConfig| -> Result<BranchResult> {
        let mut l = root.clone();
        let capacity = config.buffer.capacity;
        l.config = config;
        l.update_buffer(&tasks[0], &train.images)?;
        let out = l.learn_task(&tasks[1], &train.images, |_| {})?;
        let report = evaluate(&l.model, &test.manifest, &test.images, &l.groups(2), &l.config)?;
        let r = BranchResult {
            label,
            capacity,
            first_task_map: report.subset_map(&first, 0).unwrap_or(0.0),
            new_map: report.group_map("new").unwrap_or(0.0),
            all_map: report.group_map("all").unwrap_or(0.0),
            seconds: out.seconds,
        };
        log::info!(
            "seed {seed} {}: task-1 {:.3} new {:.3} all {:.3} ({:.0}s)",
            r.label,
            r.first_task_map,
            r.new_map,
            r.all_map,
            r.seconds
        );
        Ok(r)
    };
    let fine_tuning = branch("fine-tuning".into(), fine_tuning_config(&base))?;
    let abr = capacities
        .iter()
        .map(|&m| {
            let mut c = base.clone();
            c.buffer.capacity = m;
            branch(format!("abr M={m}"), c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult {
        seed,
        initial_map,
        fine_tuning,
        abr,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median-seed summary of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    /// Drop of fine-tuning on first-task classes.
    pub fine_tuning_drop: f64,
    /// ABR minus fine-tuning on first-task classes after task 2.
    pub retention_gain: f64,
    /// |ABR − fine-tuning| on new classes.
    pub new_class_gap: f64,
    /// Median all-class mAP per capacity, ascending capacity.
    pub all_map_by_capacity: Vec<(usize, f64)>,
}

/// Medians over seeds of each margin; `full` is the capacity of the
/// reference ABR branch.
pub fn summarize(results: &[SeedResult], full: usize) -> Result<StudySummary> {
    let pick = |f: &dyn Fn(&SeedResult) -> Option<f64>| -> Result<f64> {
        let v = results
            .iter()
            .map(|r| f(r).ok_or_else(|| Error::invalid(format!("no ABR branch with capacity {full}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(median(&v))
    };
    let mut capacities: Vec<usize> = results.iter().flat_map(|r| r.abr.iter().map(|b| b.capacity)).collect();
    capacities.sort_unstable();
    capacities.dedup();
    let all_map_by_capacity = capacities
        .iter()
        .map(|&m| {
            let v: Vec<f64> = results.iter().filter_map(|r| r.abr_at(m)).map(|b| b.all_map).collect();
            (m, median(&v))
        })
        .collect();
    Ok(StudySummary {
        fine_tuning_drop: pick(&|r| Some(r.initial_map - r.fine_tuning.first_task_map))?,
        retention_gain: pick(&|r| r.abr_at(full).map(|b| b.first_task_map - r.fine_tuning.first_task_map))?,
        new_class_gap: pick(&|r| r.abr_at(full).map(|b| (b.new_map - r.fine_tuning.new_map).abs()))?,
        all_map_by_capacity,
    })
}

/// Memory size against final all-class mAP, one line per seed plus the
/// median.
pub fn memory_plot(results: &[SeedResult], summary: &StudySummary) -> String {
    let mut series: Vec<Series> = results
        .iter()
        .map(|r| {
            let mut points: Vec<(f64, f64)> = r.abr.iter().map(|b| (b.capacity as f64, 100.0 * b.all_map)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: format!("seed {}", r.seed),
                points,
            }
        })
        .collect();
    series.push(Series {
        label: "median".into(),
        points: summary
            .all_map_by_capacity
            .iter()
            .map(|&(m, v)| (m as f64, 100.0 * v))
            .collect(),
    });
    line_plot_svg("mAP vs memory size", "memory size (boxes)", "mAP@50", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
