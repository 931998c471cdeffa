//! Trains a small model and aggregates its captured layer-attention weights
//! into per-modality, per-head, per-query and per-TR profiles.
//!
//! `cargo run --release --example attribution`

use layergate::cli::{cmd_attribute, cmd_train};
use layergate::config::{Preset, RunConfig};

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
    let cfg = small_config("attribution")?;
    let report = cmd_train(&cfg)?;
    for (m, profile) in cmd_attribute(&cfg, &report.checkpoint, cfg.eval.attribution_batches)? {
        let star = cfg.data.planted.plans[m].planted_layer;
        println!("{:>6} (planted layer {star}): {:.3}", m.name(), profile);
    }
    println!("profiles and heatmaps in {}", cfg.out.join("attribution").display());
    Ok(())
}
