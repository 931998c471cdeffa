//! Trains a small model, scores it per parcel and per network, then ablates
//! each modality and reports the drops.
//!
//! `cargo run --release --example evaluate_ablate`

use layergate::cli::{cmd_ablate, cmd_evaluate, cmd_train};
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
    let cfg = small_config("ablate")?;
    let report = cmd_train(&cfg)?;
    let full = cmd_evaluate(&cfg, &report.checkpoint)?;
    println!("validation mean Pearson {:.4}", full.mean());
    if let Some(nets) = full.network_means() {
        println!("network means: {:.3?}", nets);
    }
    for (m, scores) in cmd_ablate(&cfg, &report.checkpoint)? {
        println!("without {:>6}: {:.4} (drop {:.4})", m.name(), scores.mean(), full.mean() - scores.mean());
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}
