//! Trains the desk model on the planted dataset and reports validation
//! Pearson per epoch.
//!
//! `cargo run --release --example train_planted -- [overrides.toml]`

use std::time::Instant;

use layergate::attribution::capture_attention;
use layergate::brain_encoder::BrainEncoder;
use layergate::config::{Preset, RunConfig};
use layergate::trainer::train;

fn main() -> layergate::Result<()> {
    let overrides = std::env::args().nth(1).map(std::path::PathBuf::from);
    let cfg = RunConfig::load(Preset::Desk, overrides.as_deref())?;
    let data = cfg.dataset()?;
    let split = data.split(cfg.train.val_fraction)?;
    let model = BrainEncoder::new(cfg.model_config(&data), cfg.train.seed)?;
    println!("parameters: {}", model.num_parameters());
    let start = Instant::now();
    let outcome = train(model, &data, &split, &cfg.train)?;
    for r in &outcome.history {
        println!("epoch {:>2}  loss {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_pearson);
    }
    println!(
        "best epoch {} val {:.4} in {:.1}s",
        outcome.best_epoch,
        outcome.best_val_pearson,
        start.elapsed().as_secs_f64()
    );
    let acc = capture_attention(&outcome.checkpoint.model, &data, &split.val, 4, 8)?;
    for (m, a) in acc.iter() {
        let Some(a) = a else { continue };
        let profile = a.modality_profile()?;
        let star = cfg.data.planted.plans[m].planted_layer;
        let near: f64 = profile
            .iter()
            .enumerate()
            .filter(|(l, _)| l.abs_diff(star) <= 1)
            .map(|(_, v)| v)
            .sum();
        let peak = profile.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        println!("{m:>6}: planted layer {star}, peak {peak}, mass within one layer {near:.3}");
    }
    Ok(())
}
