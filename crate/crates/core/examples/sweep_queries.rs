//! Sweeps the number of pooler queries, then ensembles the sweep's models.
//!
//! `cargo run --release --example sweep_queries`

use layergate::cli::{cmd_ensemble, cmd_sweep_nq};
use layergate::config::{Preset, RunConfig};
use layergate::ensembler::{select_top_n, RegistryEntry};

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
    let cfg = small_config("sweep")?;
    for (nq, val) in cmd_sweep_nq(&cfg)? {
        println!("n_queries {nq:>2}: {val:.4}");
    }
    let text = std::fs::read_to_string(cfg.out.join("sweep/registry.json"))?;
    let registry: Vec<RegistryEntry> = serde_json::from_str(&text)?;
    let members: Vec<_> = select_top_n(&registry, cfg.ensemble.top_n).into_iter().map(|e| e.checkpoint).collect();
    let scores = cmd_ensemble(&cfg, &members)?;
    println!("ensemble of {} members: {:.4}", members.len(), scores.mean());
    Ok(())
}
