//! Computes per-parcel softmax ensemble weights from member scores and
//! combines member predictions.
//!
//! `cargo run --release --example ensemble`

use layergate::ensembler::{compute_weights, ensemble_predict};
use ndarray::{Array3, Axis};

fn main() -> layergate::Result<()> {
    // (members, subjects, parcels)
    let rho = Array3::from_shape_vec((3, 1, 2), vec![0.30, 0.10, 0.00, 0.25, 0.10, 0.05]).unwrap();
    for tau in [1.0, 0.3, 0.05, 1e-6] {
        let w = compute_weights(rho.view(), tau)?;
        println!("tau {tau:>6}: parcel 0 weights {:.4}", w.slice(ndarray::s![.., 0, 0]));
    }
    let w = compute_weights(rho.view(), 0.3)?;
    // (members, TRs, parcels)
    let preds = Array3::from_shape_vec((3, 2, 2), vec![1.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0, 3.0, 0.5, 0.5, 1.5, 2.0]).unwrap();
    let out = ensemble_predict(preds.view(), w.index_axis(Axis(1), 0))?;
    println!("ensemble prediction:\n{out:.4}");
    Ok(())
}
