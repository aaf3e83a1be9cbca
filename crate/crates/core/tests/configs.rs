use std::path::Path;

use abr::trainer::TrainConfig;

fn shipped(name: &str) -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    TrainConfig::resolve(Some(&path), &[]).unwrap()
}

#[test]
fn defaults_file_matches_built_in_defaults() {
    assert_eq!(shipped("defaults.toml"), TrainConfig::default());
}

#[test]
fn profiles_resolve() {
    let shapes = shipped("shapes-2task.cfg");
    assert_eq!(shapes.data.protocol, "4-4");
    assert!(shapes.data.root.is_empty());
    let voc = shipped("voc-10-10.cfg");
    assert_eq!(voc.buffer.capacity, 2000);
    assert_eq!((voc.train.lr_initial, voc.train.lr), (0.005, 0.002));
}
