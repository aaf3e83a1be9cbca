//! Command-line front end. `run` returns the process exit status: 0 on
//! success, 2 for usage and configuration errors, 1 for anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::{compose, render_preview};
use crate::buffer::{BoxBuffer, BUFFER_FORMAT};
use crate::data::{generate_shapes_dataset, split_tasks, ClassMap, Split};
use crate::detector::{Checkpoint, CHECKPOINT_FORMAT};
use crate::error::{Error, Result};
use crate::eval::ClassGroups;
use crate::geometry::ClassId;
use crate::rng::stream;
use crate::trainer::{evaluate, latest_record, load_data, load_plan, run_protocol, ProtocolData, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "abr", about = "Incremental object detection with augmented box replay", disable_version_flag = true)]
struct Cli {
    /// Print the version and the artifact formats this build reads.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.beta=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed (same as `--set train.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default `run`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the task sequence and write checkpoints, buffers and metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to `eval-<split>.json` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print statistics of a stored box buffer.
    BufferInspect {
        #[command(flatten)]
        common: Common,
        /// Buffer directory; defaults to the latest task of the run directory.
        #[arg(long)]
        buffer: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write composed replay samples with their boxes drawn.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        /// Buffer directory; defaults to the latest task of the run directory.
        #[arg(long)]
        buffer: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
    },
    /// Show how the protocol splits the training set.
    ProtocolSplit {
        #[command(flatten)]
        common: Common,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic shapes dataset (`train/` and `test/`).
    GenShapes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, base: Option<&Path>) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    overrides.extend(common.overrides.iter().cloned());
    TrainConfig::resolve(common.config.as_deref().or(base), &overrides)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(common: &Common) -> Result<()> {
    let config = resolve(common, None)?;
    let run = common.run_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let (train, test) = load_data(&config)?;
    let plan = load_plan(&config, &train.manifest.classes)?;
    let data = ProtocolData {
        train: &train.manifest,
        train_images: train.images.as_ref(),
        test: &test.manifest,
        test_images: test.images.as_ref(),
    };
    let (records, _) = run_protocol(data, &plan, &config, Some(&run), |_| {})?;
    for r in &records {
        print!("{}", r.eval.render_table(&format!("after task {}", r.task)));
    }
    println!("run directory: {}", run.display());
    Ok(())
}

/// Config of the run a checkpoint at `<run>/task-k/checkpoint.json` came from.
fn run_config_of(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.parent()?.join("config.toml");
    p.exists().then_some(p)
}

fn eval(common: &Common, checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let split: Split = split.parse().map_err(|e: Error| Error::Config {
        key: "--split".into(),
        message: e.to_string(),
    })?;
    let base = run_config_of(checkpoint);
    let config = resolve(common, base.as_deref())?;
    let ck = Checkpoint::load(checkpoint)?;
    let (train, test) = load_data(&config)?;
    let data = if split == Split::Train { train } else { test };
    let t = ck.task;
    let groups = ClassGroups {
        old: ck.task_classes.iter().take(t.saturating_sub(1)).flatten().copied().collect(),
        new: ck.task_classes.get(t.wrapping_sub(1)).cloned().unwrap_or_default(),
    };
    let report = evaluate(&ck.model, &data.manifest, data.images.as_ref(), &groups, &config)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .with_file_name(format!("eval-{}.json", split.dir_name()))
    });
    write(&path, &report.to_json()?)?;
    print!("{}", report.render_table(&format!("task {t} ({})", split.dir_name())));
    println!("report: {}", path.display());
    Ok(())
}

fn buffer_dir(common: &Common, buffer: Option<&Path>) -> Result<PathBuf> {
    if let Some(b) = buffer {
        return Ok(b.to_path_buf());
    }
    let run = common.run_dir.as_deref().unwrap_or(Path::new("run"));
    let record = latest_record(run)?
        .ok_or_else(|| Error::Empty(format!("buffer empty: {} has no finished task", run.display())))?;
    Ok(run.join(record.buffer))
}

fn buffer_inspect(common: &Common, buffer: Option<&Path>, json: bool) -> Result<()> {
    let dir = buffer_dir(common, buffer)?;
    let b = BoxBuffer::load(&dir)?;
    let stats = b.stats();
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats.render());
    }
    Ok(())
}

fn augment_preview(common: &Common, buffer: Option<&Path>, n: usize, out: &Path) -> Result<()> {
    let dir = buffer_dir(common, buffer)?;
    let b = BoxBuffer::load(&dir)?;
    if b.is_empty() {
        return Err(Error::Empty(format!("buffer empty: {}", dir.display())));
    }
    let base = Some(common.run_dir.as_deref().unwrap_or(Path::new("run")).join("config.toml")).filter(|p| p.exists());
    let config = resolve(common, base.as_deref())?;
    let (train, _) = load_data(&config)?;
    let plan = load_plan(&config, &train.manifest.classes)?;
    // preview on the first task whose classes are not in the buffer
    let tasks = split_tasks(&train.manifest, &plan)?;
    let task = tasks
        .iter()
        .find(|t| t.spec.classes.iter().all(|c| !b.seen_classes.contains(c)))
        .ok_or_else(|| Error::invalid("every task's classes are already in the buffer"))?;
    let replay = config.replay.to_replay_config();
    let mut rng = stream(config.train.seed, "preview", task.spec.index as u64);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    #[derive(Serialize)]
    struct Entry<'a> {
        file: String,
        kind: String,
        trace: &'a crate::augment::ReplayTrace,
    }
    let mut traces = Vec::new();
    let samples: Vec<_> = task.samples.iter().take(n).collect();
    let mut composed = Vec::with_capacity(samples.len());
    for s in &samples {
        let img = train.images.image(s.entry)?;
        composed.push(compose(&img, &s.annotations, &b, &replay, &mut rng)?);
    }
    for (i, c) in composed.iter().enumerate() {
        let file = format!("{i:03}.png");
        render_preview(c).save_png(&out.join(&file))?;
        traces.push(Entry {
            file,
            kind: format!("{:?}", c.replay_kind).to_lowercase(),
            trace: &c.trace,
        });
    }
    write(&out.join("traces.json"), &serde_json::to_string_pretty(&traces)?)?;
    println!("{} previews in {}", composed.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TaskSplitSummary {
    task: usize,
    classes: Vec<String>,
    images: usize,
    visible_objects: usize,
    /// Objects in the task's images whose class belongs to another task.
    unlabeled_objects: usize,
    /// Images also used by another task.
    shared_images: usize,
}

fn names(classes: &ClassMap, ids: &[ClassId]) -> Vec<String> {
    ids.iter()
        .map(|&c| classes.name(c).map_or_else(|| c.to_string(), str::to_string))
        .collect()
}

fn protocol_split(common: &Common, out: Option<&Path>) -> Result<()> {
    let config = resolve(common, None)?;
    let (train, _) = load_data(&config)?;
    let m = &train.manifest;
    let plan = load_plan(&config, &m.classes)?;
    let tasks = split_tasks(m, &plan)?;
    let summaries: Vec<TaskSplitSummary> = tasks
        .iter()
        .map(|t| {
            let visible: usize = t.samples.iter().map(|s| s.annotations.len()).sum();
            let total: usize = t.samples.iter().map(|s| m.entries[s.entry].objects.len()).sum();
            let shared = t
                .samples
                .iter()
                .filter(|s| {
                    tasks
                        .iter()
                        .any(|o| o.spec.index != t.spec.index && o.samples.iter().any(|x| x.entry == s.entry))
                })
                .count();
            TaskSplitSummary {
                task: t.spec.index,
                classes: names(&m.classes, &t.spec.classes),
                images: t.len(),
                visible_objects: visible,
                unlabeled_objects: total - visible,
                shared_images: shared,
            }
        })
        .collect();
    println!("protocol {} over {} images", plan.name, m.len());
    for s in &summaries {
        println!(
            "task {}: {} images, {} labeled, {} unlabeled, {} shared  [{}]",
            s.task,
            s.images,
            s.visible_objects,
            s.unlabeled_objects,
            s.shared_images,
            s.classes.join(", ")
        );
    }
    if let Some(path) = out {
        write(path, &serde_json::to_string_pretty(&summaries)?)?;
    }
    Ok(())
}

fn gen_shapes(common: &Common, out: &Path) -> Result<()> {
    let config = resolve(common, None)?;
    let seed = config.train.seed;
    for (split, test) in [(Split::Train, false), (Split::Test, true)] {
        let ds = generate_shapes_dataset(&config.data.shapes(seed, test))?;
        ds.write_to_dir(&out.join(split.dir_name()))?;
        println!("{}: {} images", split.dir_name(), ds.manifest.len());
    }
    Ok(())
}

fn version() -> String {
    format!(
        "abr {}\ncheckpoint format {CHECKPOINT_FORMAT}\nbuffer format {BUFFER_FORMAT}",
        env!("CARGO_PKG_VERSION")
    )
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Train { common } => train(common),
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => eval(common, checkpoint, split, out.as_deref()),
        Command::BufferInspect { common, buffer, json } => buffer_inspect(common, buffer.as_deref(), *json),
        Command::AugmentPreview { common, buffer, n, out } => augment_preview(common, buffer.as_deref(), *n, out),
        Command::ProtocolSplit { common, out } => protocol_split(common, out.as_deref()),
        Command::GenShapes { common, out } => gen_shapes(common, out),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.version {
        println!("{}", version());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (try --help)");
        return 2;
    };
    match dispatch(&command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}
