//! Generates a planted dataset, writes it as feature and target files with a
//! manifest, and reads it back.
//!
//! `cargo run --release --example generate_dataset`

use layergate::cli::cmd_generate;
use layergate::config::{Preset, RunConfig};
use layergate::feature_store::{read_features, read_matrix, Dataset};

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
    let cfg = small_config("generate")?;
    let manifest = cmd_generate(&cfg)?;
    println!("manifest: {}", manifest.display());
    let data = Dataset::load(&manifest)?;
    println!("windows {}, subjects {}, parcels {}, TRs {}", data.len(), data.n_subjects, data.parcels, data.k_out);
    let first = &data.windows[0];
    for (m, f) in first.features.iter() {
        println!("{:>6}: layers {} frames {} hidden {}", m.name(), f.layers(), f.frames(), f.hidden());
    }
    let dir = manifest.parent().unwrap();
    let entry = &layergate::feature_store::Manifest::read(&manifest)?.windows[0];
    let vision = read_features(dir.join(entry.features.get(layergate::modality::Modality::Vision)))?;
    let target = read_matrix(dir.join(&entry.target))?;
    println!("re-read vision {:?}, target {:?}", vision.data().dim(), target.dim());
    Ok(())
}
