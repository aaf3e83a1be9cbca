//! Two-task shapes study: fine-tuning against ABR at several memory sizes,
//! starting from `configs/shapes-2task.cfg`.
//!
//! cargo run --release --example forgetting_study -- [seeds] [key=value ...]

use abr::experiment::{memory_plot, run_seed, summarize};
use abr::trainer::TrainConfig;

fn main() -> abr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let overrides: Vec<String> = args.collect();
    let profile = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/shapes-2task.cfg");
    let config = TrainConfig::resolve(Some(&profile), &overrides)?;
    let capacities = [0, 40, config.buffer.capacity];
    let results = (0..seeds)
        .map(|s| run_seed(&config, s, &capacities))
        .collect::<abr::Result<Vec<_>>>()?;
    for r in &results {
        println!(
            "seed {}: after task 1 {:.1} | fine-tuning task-1 {:.1} new {:.1}",
            r.seed,
            100.0 * r.initial_map,
            100.0 * r.fine_tuning.first_task_map,
            100.0 * r.fine_tuning.new_map
        );
        for b in &r.abr {
            println!(
                "  {:<10} task-1 {:.1} new {:.1} all {:.1}",
                b.label,
                100.0 * b.first_task_map,
                100.0 * b.new_map,
                100.0 * b.all_map
            );
        }
    }
    let summary = summarize(&results, config.buffer.capacity)?;
    println!("median fine-tuning drop   {:.1}", 100.0 * summary.fine_tuning_drop);
    println!("median ABR retention gain {:.1}", 100.0 * summary.retention_gain);
    println!("median new-class gap      {:.1}", 100.0 * summary.new_class_gap);
    for (m, v) in &summary.all_map_by_capacity {
        println!("M={m:<4} all-class mAP {:.1}", 100.0 * v);
    }
    let path = std::path::Path::new("memory_size.svg");
    std::fs::write(path, memory_plot(&results, &summary)).map_err(|e| abr::Error::io(path, e))?;
    Ok(())
}
