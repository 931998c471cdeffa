//! Prints the resolved presets and the model size each implies, and shows
//! a user override merged on top.
//!
//! `cargo run --release --example config_presets`

use layergate::brain_encoder::BrainEncoder;
use layergate::config::{Preset, RunConfig};

fn main() -> layergate::Result<()> {
    let desk = RunConfig::preset(Preset::Desk);
    let data = desk.dataset()?;
    let model = BrainEncoder::new(desk.model_config(&data), 0)?;
    println!("desk preset: {} parameters\n{}", model.num_parameters(), desk.to_toml());
    let paper = RunConfig::preset(Preset::Paper);
    println!(
        "full-scale preset: encoder width {}, depth {}, {} queries",
        paper.model.encoder.hidden, paper.model.encoder.depth, paper.model.pooler_config.n_queries
    );
    let tuned = RunConfig::from_toml_str(Preset::Desk, "[train]\nepochs = 3\n[model.pooler_config]\nn_queries = 2\n")?;
    println!("override: epochs {}, queries {}", tuned.train.epochs, tuned.model.pooler_config.n_queries);
    Ok(())
}
