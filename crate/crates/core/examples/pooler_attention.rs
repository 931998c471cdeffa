//! Runs the cross-attention layer pooler on random features, checks that
//! the captured weights are distributions over layers, and compares output
//! widths with the fixed poolers.
//!
//! `cargo run --release --example pooler_attention`

use layergate::layer_gating::{pool_depth_groups, pool_mean, CrossAttentionPooler, PoolerConfig};
use layergate::nn::normal;
use layergate::params::ParamStore;
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> layergate::Result<()> {
    let (layers, frames, hidden) = (12, 5, 16);
    let cfg = PoolerConfig {
        n_queries: 4,
        heads: 2,
        attention_dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let pooler = CrossAttentionPooler::new(&mut store, "pooler", hidden, &cfg, &mut rng)?;
    let x = Array3::from_shape_vec((layers, frames, hidden), normal(&mut rng, 1.0, layers * frames * hidden)).unwrap();
    let (pooled, weights, _) = pooler.forward::<ChaCha8Rng>(&store, x.view(), true, None)?;
    let weights = weights.expect("captured");
    let worst = weights.lanes(Axis(3)).into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    println!("xattn output {:?}, weights {:?}, max |sum - 1| {worst:.1e}", pooled.dim(), weights.dim());
    let profile = weights.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
    println!("mean weight per layer: {:.3}", profile);
    println!("mean pooler output {:?}", pool_mean(x.view()).dim());
    println!("depth-group pooler output {:?}", pool_depth_groups(x.view())?.dim());
    Ok(())
}
