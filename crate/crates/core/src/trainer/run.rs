//! Protocol runs with an on-disk run directory:
//!
//! ```text
//! run/
//!   config.toml          resolved configuration
//!   records.json         one TaskRunRecord per finished task
//!   forgetting.svg       per-task mAP curves
//!   task-1/
//!     checkpoint.json
//!     buffer/            crops/*.png + manifest.jsonl
//!     losses.jsonl
//!     eval.json
//!     record.json
//! ```
//!
//! A run directory that already holds finished tasks is resumed from the
//! last complete one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, IncrementalLearner, TrainConfig};
use crate::buffer::BoxBuffer;
use crate::data::{
    generate_shapes_dataset, load_split, split_tasks, ClassMap, DatasetManifest, ImageSource, ProtocolPlan, Split,
};
use crate::detector::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{line_plot_svg, EvalReport, Series};
use crate::geometry::ClassId;
use crate::losses::LossRecord;

/// Train and test splits with their pixel sources.
#[derive(Clone, Copy)]
pub struct ProtocolData<'a> {
    pub train: &'a DatasetManifest,
    pub train_images: &'a dyn ImageSource,
    pub test: &'a DatasetManifest,
    pub test_images: &'a dyn ImageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRunRecord {
    pub task: usize,
    pub classes: Vec<ClassId>,
    pub seen_classes: Vec<ClassId>,
    /// Paths relative to the run directory; empty for in-memory runs.
    pub checkpoint: String,
    pub buffer: String,
    pub loss_log: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub teacher_checksum: Option<u64>,
    pub model_checksum: u64,
    pub buffer_size: usize,
    /// mAP@first-threshold on the classes of task 1.
    pub first_task_map: Option<f64>,
    pub eval: EvalReport,
    pub seconds: f64,
    /// Full loss curve; only kept for in-memory runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<LossRecord>,
}

fn task_dir(run: &Path, t: usize) -> PathBuf {
    run.join(format!("task-{t}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The most recent record of a run directory, if any task finished.
pub fn latest_record(run: &Path) -> Result<Option<TaskRunRecord>> {
    let path = run.join("records.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<TaskRunRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(records.into_iter().last())
}

fn load_finished(run: &Path, t: usize) -> Result<Option<(TaskRunRecord, Checkpoint, BoxBuffer)>> {
    let dir = task_dir(run, t);
    let path = dir.join("record.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let record: TaskRunRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let ck = Checkpoint::load(&run.join(&record.checkpoint))?;
    let buffer = BoxBuffer::load(&run.join(&record.buffer))?;
    Ok(Some((record, ck, buffer)))
}

fn forgetting_plot(records: &[TaskRunRecord]) -> String {
    let mut series = Vec::new();
    let mut push = |label: &str, f: &dyn Fn(&TaskRunRecord) -> Option<f64>| {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| f(r).map(|m| (r.task as f64, 100.0 * m)))
            .collect();
        if !points.is_empty() {
            series.push(Series {
                label: label.into(),
                points,
            });
        }
    };
    push("task-1 classes", &|r| r.first_task_map);
    push("old", &|r| r.eval.group_map("old"));
    push("new", &|r| r.eval.group_map("new"));
    push("all seen", &|r| r.eval.group_map("all"));
    line_plot_svg("mAP after each task", "task", "mAP", &series)
}

/// Runs every task of `plan`. With a run directory, artifacts are written
/// after each task and finished tasks found there are reloaded instead of
/// retrained. The learner is returned so callers can branch from it.
pub fn run_protocol(
    data: ProtocolData<'_>,
    plan: &ProtocolPlan,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(Vec<TaskRunRecord>, IncrementalLearner)> {
    config.validate()?;
    let tasks = split_tasks(data.train, plan)?;
    let mut learner = IncrementalLearner::new(config.clone(), plan.clone());
    let mut records = Vec::new();
    if let Some(run) = run_dir {
        fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
        let snapshot = run.join("config.toml");
        if snapshot.exists() {
            let text = fs::read_to_string(&snapshot).map_err(|e| Error::io(&snapshot, e))?;
            let mut previous = TrainConfig::default();
            previous.merge_toml(&text, &snapshot)?;
            if previous != *config {
                return Err(Error::Config {
                    key: "run-dir".into(),
                    message: format!("{} was created with a different configuration", run.display()),
                });
            }
        }
        write(&snapshot, &config.to_toml())?;
        for t in 1..=plan.num_tasks() {
            let Some((record, ck, buffer)) = load_finished(run, t)? else {
                break;
            };
            log::info!("task {t}: reusing finished artifacts in {}", run.display());
            learner.model = ck.model;
            learner.step = ck.step;
            learner.buffer = buffer;
            learner.completed = t;
            records.push(record);
        }
    }
    let task_classes: Vec<Vec<ClassId>> = plan.tasks.iter().map(|t| t.classes.clone()).collect();
    let first: Vec<ClassId> = plan.task(1).map(|s| s.classes.clone()).unwrap_or_default();
    for task in tasks.iter().skip(learner.completed) {
        let t = task.spec.index;
        let mut loss_file = match run_dir {
            Some(run) => {
                let dir = task_dir(run, t);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("losses.jsonl");
                Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
            }
            None => None,
        };
        let log_every = config.train.log_every;
        let mut io_error = None;
        let outcome = learner.learn_task(task, data.train_images, |r| {
            if let Some((f, path)) = &mut loss_file {
                let line = serde_json::to_string(r).expect("loss record serialises");
                if let Err(e) = writeln!(f, "{line}") {
                    io_error.get_or_insert(Error::io(path.as_path(), e));
                }
            }
            if log_every > 0 && r.step % log_every as u64 == 0 {
                log::info!(
                    "task {} step {}: total {:.4} det {:.4} id {:.4} afd {:.4} pad {:.4}",
                    r.task,
                    r.step,
                    r.total,
                    r.det,
                    r.id,
                    r.afd,
                    r.pad
                );
            }
            on_step(r);
        })?;
        if let Some(e) = io_error {
            return Err(e);
        }
        let eval = evaluate(&learner.model, data.test, data.test_images, &learner.groups(t), config)?;
        let mut record = TaskRunRecord {
            task: t,
            classes: task.spec.classes.clone(),
            seen_classes: plan.seen_classes(t),
            checkpoint: String::new(),
            buffer: String::new(),
            loss_log: String::new(),
            steps: learner.step,
            final_loss: outcome.losses.last().map(|r| r.total),
            teacher_checksum: outcome.teacher_checksum,
            model_checksum: learner.model.checksum(),
            buffer_size: learner.buffer.len(),
            first_task_map: eval.subset_map(&first, 0),
            eval,
            seconds: outcome.seconds,
            losses: Vec::new(),
        };
        if let Some(run) = run_dir {
            let dir = task_dir(run, t);
            let rel = |name: &str| format!("task-{t}/{name}");
            Checkpoint::new(learner.model.clone(), t, learner.step, task_classes.clone())
                .save(&dir.join("checkpoint.json"))?;
            learner.buffer.save(&dir.join("buffer"))?;
            write(&dir.join("eval.json"), &record.eval.to_json()?)?;
            record.checkpoint = rel("checkpoint.json");
            record.buffer = rel("buffer");
            record.loss_log = rel("losses.jsonl");
            write(&dir.join("record.json"), &serde_json::to_string_pretty(&record)?)?;
            records.push(record);
            write(&run.join("records.json"), &serde_json::to_string_pretty(&records)?)?;
            write(&run.join("forgetting.svg"), &forgetting_plot(&records))?;
        } else {
            record.losses = outcome.losses;
            records.push(record);
        }
    }
    Ok((records, learner))
}

/// One split with its pixels.
pub struct SplitData {
    pub manifest: DatasetManifest,
    pub images: Box<dyn ImageSource>,
}

/// Train and test splits named by `config.data`: generated shapes when
/// `data.root` is empty, otherwise loaded from disk.
pub fn load_data(config: &TrainConfig) -> Result<(SplitData, SplitData)> {
    if config.data.root.is_empty() {
        let seed = config.train.seed;
        let train = generate_shapes_dataset(&config.data.shapes(seed, false))?;
        let test = generate_shapes_dataset(&config.data.shapes(seed, true))?;
        return Ok((
            SplitData {
                manifest: train.manifest,
                images: Box::new(train.images),
            },
            SplitData {
                manifest: test.manifest,
                images: Box::new(test.images),
            },
        ));
    }
    let root = Path::new(&config.data.root);
    let (train, train_images) = load_split(root, Split::Train, None)?;
    let (test, test_images) = load_split(root, Split::Test, Some(train.classes.clone()))?;
    Ok((
        SplitData {
            manifest: train,
            images: Box::new(train_images),
        },
        SplitData {
            manifest: test,
            images: Box::new(test_images),
        },
    ))
}

/// `data.protocol` as an `A-B` split or a class-list file.
pub fn load_plan(config: &TrainConfig, classes: &ClassMap) -> Result<ProtocolPlan> {
    let p = &config.data.protocol;
    if Path::new(p).is_file() {
        ProtocolPlan::read_class_lists(Path::new(p), classes)
    } else {
        ProtocolPlan::parse(p, classes.len())
    }
}
