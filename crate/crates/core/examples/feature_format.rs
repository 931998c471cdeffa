//! Round-trips layer-resolved features (half-precision payload) and a
//! target matrix through the binary file formats.
//!
//! `cargo run --release --example feature_format`

use layergate::feature_store::{read_features, read_matrix, write_features, write_matrix, LayerResolvedFeatures};
use layergate::modality::Modality;
use ndarray::{Array2, Array3};

fn main() -> layergate::Result<()> {
    let dir = std::env::temp_dir().join("layergate_examples").join("format");
    std::fs::create_dir_all(&dir)?;
    let data = Array3::from_shape_fn((4, 10, 8), |(l, t, d)| (l as f64 - t as f64 * 0.1 + d as f64 * 0.01).sin());
    let features = LayerResolvedFeatures::new(Modality::Audio, data.clone(), 2.0)?;
    let path = dir.join("audio.mirf");
    write_features(&features, &path)?;
    let back = read_features(&path)?;
    let err = (&back.data() - &data).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("features {:?} -> {} bytes, max half-precision error {err:.2e}", data.dim(), std::fs::metadata(&path)?.len());

    let target = Array2::from_shape_fn((5, 3), |(k, p)| k as f64 * 0.5 - p as f64);
    let tpath = dir.join("target.mirp");
    write_matrix(&target, &tpath)?;
    println!("target round trip exact: {}", read_matrix(&tpath)? == target);
    Ok(())
}
