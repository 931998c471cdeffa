//! Retrains on every non-empty subset of the modalities and compares scores.
//!
//! `cargo run --release --example modality_subsets`

use layergate::cli::cmd_subsets;
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
    let cfg = small_config("subsets")?;
    for (subset, scores) in cmd_subsets(&cfg)? {
        println!("{:>20}: {:.4}", subset.label(), scores.mean());
    }
    Ok(())
}
