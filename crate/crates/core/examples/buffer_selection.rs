//! Trains briefly on the first task, then fills a box buffer with the crops
//! whose pooled features lie nearest to each class prototype. The buffer is
//! written to `buffer-demo/` in the same format the CLI reads.
//!
//! cargo run --release --example buffer_selection

use abr::buffer::{select_prototype_boxes, BoxBuffer, SelectionOptions};
use abr::data::{generate_shapes_dataset, split_tasks, ProtocolPlan, ShapesConfig};
use abr::trainer::{IncrementalLearner, TrainConfig};

fn main() -> abr::Result<()> {
    let ds = generate_shapes_dataset(&ShapesConfig {
        num_classes: 4,
        images_per_class: 12,
        ..ShapesConfig::default()
    })?;
    let plan = ProtocolPlan::parse("2-2", 4)?;
    let tasks = split_tasks(&ds.manifest, &plan)?;
    let mut config = TrainConfig::default();
    config.train.iterations_initial = 100;
    config.buffer.capacity = 0;
    let mut learner = IncrementalLearner::new(config, plan.clone());
    learner.learn_task(&tasks[0], &ds.images, |_| {})?;

    let buffer = select_prototype_boxes(
        &tasks[0],
        &ds.images,
        &learner.model,
        &BoxBuffer::new(10),
        &plan.seen_classes(1),
        SelectionOptions::default(),
    )?;
    print!("{}", buffer.stats().render());
    for c in buffer.stored_classes() {
        let d: Vec<String> = buffer.class(c).iter().map(|e| format!("{:.2}", e.distance)).collect();
        println!("class {}: distances {}", c.0, d.join(" "));
    }
    let dir = std::path::Path::new("buffer-demo");
    buffer.save(dir)?;
    println!("saved to {}", dir.display());
    Ok(())
}
