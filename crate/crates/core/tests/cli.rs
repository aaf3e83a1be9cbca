use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use abr::eval::EvalReport;
use abr::trainer::{TaskRunRecord, TrainConfig};

const TINY: &str = r#"
[data]
protocol = "2-2"
shapes_classes = 4
shapes_train_per_class = 4
shapes_test_per_class = 2

[train]
iterations_initial = 6
iterations = 4
seed = 3

[buffer]
capacity = 8

[loss]
alpha = 0.7
beta = 0.25
"#;

fn abr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abr"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.cfg", "--run-dir", "run"];
    args.extend(extra);
    abr(dir, &args)
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(abr(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(abr(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(abr(dir.path(), &[]).status.code(), Some(2));

    let o = train(dir.path(), &["--set", "train.iterations=fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.iterations"), "{}", stderr(&o));
    let o = train(dir.path(), &["--set", "loss.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.nonsense"));
}

#[test]
fn version_lists_formats() {
    let dir = setup();
    let o = abr(dir.path(), &["--version"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains(abr::detector::CHECKPOINT_FORMAT));
    assert!(out.contains(abr::buffer::BUFFER_FORMAT));
}

#[test]
fn train_eval_inspect_preview() {
    let dir = setup();
    let d = dir.path();
    let o = train(d, &["--set", "loss.beta=0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // --set beats the file, the file beats the defaults
    let text = fs::read_to_string(d.join("run/config.toml")).unwrap();
    let mut snap = TrainConfig::default();
    snap.merge_toml(&text, Path::new("config.toml")).unwrap();
    assert_eq!(snap.loss.beta, 0.5);
    assert_eq!(snap.loss.alpha, 0.7);
    assert_eq!(snap.loss.gamma, TrainConfig::default().loss.gamma);
    assert_eq!(snap.train.iterations, 4);

    let records: Vec<TaskRunRecord> =
        serde_json::from_str(&fs::read_to_string(d.join("run/records.json")).unwrap()).unwrap();
    assert_eq!(records.len(), 2);
    for f in ["checkpoint.json", "losses.jsonl", "eval.json", "record.json", "buffer/manifest.jsonl"] {
        assert!(d.join("run/task-2").join(f).exists(), "missing {f}");
    }
    assert!(d.join("run/forgetting.svg").exists());

    // eval agrees with the training record and is reproducible
    let ck = "run/task-2/checkpoint.json";
    let o = abr(d, &["eval", "--checkpoint", ck, "--split", "test", "--out", "e1.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = abr(d, &["eval", "--checkpoint", ck, "--split", "test", "--out", "e2.json"]);
    assert_eq!(o.status.code(), Some(0));
    let first = fs::read(d.join("e1.json")).unwrap();
    assert_eq!(first, fs::read(d.join("e2.json")).unwrap());
    let report: EvalReport = serde_json::from_slice(&first).unwrap();
    let last = &records[1].eval;
    for g in ["old", "new", "all"] {
        assert_eq!(report.groups[g].map, last.groups[g].map, "group {g}");
    }
    assert_eq!(&report, last);

    let o = abr(d, &["buffer-inspect", "--run-dir", "run", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(stats.is_object());

    let o = abr(d, &["augment-preview", "--run-dir", "run", "--buffer", "run/task-1/buffer", "--n", "3", "--out", "pv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traces: serde_json::Value = serde_json::from_slice(&fs::read(d.join("pv/traces.json")).unwrap()).unwrap();
    assert_eq!(traces.as_array().unwrap().len(), 3);
    assert!(d.join("pv/000.png").exists());

    // a second train over the finished run reuses it
    let o = train(d, &["--set", "loss.beta=0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again: Vec<TaskRunRecord> =
        serde_json::from_str(&fs::read_to_string(d.join("run/records.json")).unwrap()).unwrap();
    assert_eq!(again, records);
    // ...but refuses a changed configuration
    assert_eq!(train(d, &["--set", "loss.beta=0.75"]).status.code(), Some(2));
}

#[test]
fn preview_of_empty_buffer_fails() {
    let dir = setup();
    let d = dir.path();
    let o = abr(d, &["augment-preview", "--n", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("buffer empty"), "{}", stderr(&o));

    let o = train(d, &["--set", "buffer.capacity=0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = abr(d, &["augment-preview", "--run-dir", "run", "--n", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("buffer empty"), "{}", stderr(&o));
}

#[test]
fn gen_shapes_then_protocol_split_from_disk() {
    let dir = setup();
    let d = dir.path();
    let o = abr(d, &["gen-shapes", "--config", "tiny.cfg", "--out", "shapes"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("shapes/train/manifest.jsonl").exists());
    assert!(d.join("shapes/test/manifest.jsonl").exists());

    let o = abr(d, &["protocol-split", "--config", "tiny.cfg", "--set", "data.root=\"shapes\"", "--out", "split.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let split: serde_json::Value = serde_json::from_slice(&fs::read(d.join("split.json")).unwrap()).unwrap();
    assert_eq!(split.as_array().unwrap().len(), 2);

    // the on-disk copy trains like the generated one
    let o = abr(d, &["train", "--config", "tiny.cfg", "--set", "data.root=\"shapes\"", "--run-dir", "disk"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = train(d, &[]);
    assert_eq!(o.status.code(), Some(0));
    let read = |p: &str| -> Vec<TaskRunRecord> { serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap() };
    let (disk, mem) = (read("disk/records.json"), read("run/records.json"));
    let sums = |r: &[TaskRunRecord]| r.iter().map(|x| x.model_checksum).collect::<Vec<_>>();
    assert_eq!(sums(&disk), sums(&mem));
}
