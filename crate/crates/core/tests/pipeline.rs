use std::fs;

use graphprune::checkpoint::{load_supernet, save_supernet, Container};
use graphprune::commands::{self, CHECKPOINT};
use graphprune::config::ExperimentConfig;
use graphprune::graph::bundled;

fn config(dir: &std::path::Path) -> ExperimentConfig {
    let text = "\
model = \"bundled:mobilenet_v2_reduced\"
seed = 6
[data]
synthetic = \"3,120,8,6\"
[train]
epochs = 1
batch_size = 16
";
    ExperimentConfig::from_toml(text, dir).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    commands::train(&cfg, false, |_| {}).unwrap();
    let path = cfg.out.join(CHECKPOINT);
    let first = fs::read(&path).unwrap();

    let g = bundled::load("mobilenet_v2_reduced").unwrap();
    let (net, meta) = load_supernet::<f32>(&path, &g).unwrap();
    assert_eq!(meta.epochs_completed, 1);
    assert_eq!(meta.seed, 6);
    let again = dir.path().join("again.bin");
    save_supernet(&again, &net, meta).unwrap();
    assert_eq!(fs::read(&again).unwrap(), first);
}

#[test]
fn checkpoint_rejects_other_description() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    commands::train(&cfg, false, |_| {}).unwrap();
    let other = bundled::load("mobilenet_v1_reduced").unwrap();
    let err = load_supernet::<f32>(&cfg.out.join(CHECKPOINT), &other).unwrap_err();
    assert_eq!(err.class(), graphprune::ErrorClass::Config);
}

#[test]
fn checkpoint_rejects_bad_version_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    commands::train(&cfg, false, |_| {}).unwrap();
    let bytes = fs::read(cfg.out.join(CHECKPOINT)).unwrap();
    assert!(Container::<f32>::from_bytes(&bytes).is_ok());
    assert!(Container::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong = bytes.clone();
    // version byte follows the 4-byte magic
    wrong[4] = 99;
    assert!(Container::<f32>::from_bytes(&wrong).is_err());
}

#[test]
fn search_then_flops_agree_on_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.search.episodes = 6;
    cfg.search.warmup_episodes = 3;
    commands::train(&cfg, false, |_| {}).unwrap();
    let msg = commands::search(&cfg, &cfg.out.join(CHECKPOINT), |_| {}).unwrap();
    assert!(msg.starts_with("best accuracy"));
    let table = commands::flops(
        "bundled:mobilenet_v2_reduced",
        Some(&cfg.out.join(commands::BEST_RATIOS)),
        &cfg.out,
    )
    .unwrap();
    let g = bundled::load("mobilenet_v2_reduced").unwrap();
    let budget = cfg.budget.resolve(&g).unwrap();
    let total: u64 = table
        .lines()
        .find_map(|l| l.strip_prefix("total: "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(total <= budget);
}
