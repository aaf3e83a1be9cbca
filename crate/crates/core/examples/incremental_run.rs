//! A three-task protocol on shapes with every artifact written to
//! `run-demo/`. Run it twice: the second run finds the finished tasks and
//! reloads them instead of training again.
//!
//! cargo run --release --example incremental_run

use std::path::Path;

use abr::trainer::{load_data, load_plan, run_protocol, ProtocolData, TrainConfig};

fn main() -> abr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = TrainConfig::resolve(
        None,
        &[
            "data.protocol=\"4-2\"".into(),
            "data.shapes_train_per_class=20".into(),
            "train.iterations_initial=300".into(),
            "train.iterations=300".into(),
            "loss.beta=0.02".into(),
            "buffer.capacity=48".into(),
            "train.log_every=100".into(),
        ],
    )?;
    let (train, test) = load_data(&config)?;
    let plan = load_plan(&config, &train.manifest.classes)?;
    let data = ProtocolData {
        train: &train.manifest,
        train_images: train.images.as_ref(),
        test: &test.manifest,
        test_images: test.images.as_ref(),
    };
    let (records, learner) = run_protocol(data, &plan, &config, Some(Path::new("run-demo")), |_| {})?;
    for r in &records {
        print!("{}", r.eval.render_table(&format!("after task {}", r.task)));
        println!(
            "  steps {}  buffer {}  first-task mAP {:.1}",
            r.steps,
            r.buffer_size,
            100.0 * r.first_task_map.unwrap_or(0.0)
        );
    }
    println!("head width {}, artifacts in run-demo/", learner.model.head_width());
    Ok(())
}
