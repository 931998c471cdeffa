//! Trains briefly, writes a checkpoint, reloads it and confirms the
//! reloaded model predicts identically.
//!
//! `cargo run --release --example checkpoint_roundtrip`

use layergate::brain_encoder::{read_checkpoint, write_checkpoint, BrainEncoder};
use layergate::config::{Preset, RunConfig};
use layergate::evaluator::predict_windows;
use layergate::trainer::train;

const SMALL: &str = r#"
[data.planted]
n_windows = 96
frames = 40
k_out = 10
parcels = 12
[data.planted.plans.vision]
layers = 6
hidden = 16
planted_layer = 4
[data.planted.plans.audio]
layers = 6
hidden = 16
planted_layer = 2
[data.planted.plans.text]
layers = 6
hidden = 16
planted_layer = 5
[model.pooler_config]
n_queries = 4
heads = 2
[model.encoder]
hidden = 32
depth = 1
heads = 2
max_frames = 40
[train]
epochs = 8
batch_size = 2
[eval]
attribution_batches = 2
attribution_batch_size = 4
[sweep]
nq_grid = [1, 2, 4]
"#;

/// Small planted problem writing under the system temp directory.
fn small_config(name: &str) -> layergate::Result<RunConfig> {
    let mut cfg = RunConfig::from_toml_str(Preset::Desk, SMALL)?;
    cfg.out = std::env::temp_dir().join("layergate_examples").join(name);
    Ok(cfg)
}

fn main() -> layergate::Result<()> {
    let cfg = small_config("checkpoint")?;
    let data = cfg.dataset()?;
    let split = data.split(cfg.train.val_fraction)?;
    let model = BrainEncoder::new(cfg.model_config(&data), cfg.train.seed)?;
    let outcome = train(model, &data, &split, &cfg.train)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("model.ckpt");
    write_checkpoint(&outcome.checkpoint, &path)?;
    let back = read_checkpoint(&path)?;
    let active = back.model.config.modalities;
    let a = predict_windows(&outcome.checkpoint.model, &data, &split.val, active)?;
    let b = predict_windows(&back.model, &data, &split.val, active)?;
    println!("checkpoint {} bytes, epoch {}, predictions identical: {}", std::fs::metadata(&path)?.len(), outcome.best_epoch, a == b);
    Ok(())
}
