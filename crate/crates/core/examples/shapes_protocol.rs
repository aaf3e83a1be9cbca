//! Generates a small shapes dataset and shows what each task of a `2-2`
//! protocol sees: labelled objects of its own classes, and objects of other
//! classes left unlabelled in the same images.
//!
//! cargo run --example shapes_protocol

use abr::data::{generate_shapes_dataset, split_tasks, ProtocolPlan, ShapesConfig};

fn main() -> abr::Result<()> {
    let ds = generate_shapes_dataset(&ShapesConfig {
        num_classes: 4,
        images_per_class: 6,
        ..ShapesConfig::default()
    })?;
    let m = &ds.manifest;
    println!("{} images, classes {:?}", m.len(), m.classes.names());
    println!("instances per class {:?}", &m.instance_counts()[1..]);

    let plan = ProtocolPlan::parse("2-2", m.classes.len())?;
    for task in split_tasks(m, &plan)? {
        let visible: usize = task.samples.iter().map(|s| s.annotations.len()).sum();
        let present: usize = task.samples.iter().map(|s| m.entries[s.entry].objects.len()).sum();
        let names: Vec<&str> = task.spec.classes.iter().filter_map(|&c| m.classes.name(c)).collect();
        println!(
            "task {} {:?}: {} images, {} labelled objects, {} unlabelled",
            task.spec.index,
            names,
            task.len(),
            visible,
            present - visible
        );
    }
    Ok(())
}
