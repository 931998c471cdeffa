//! Validation-weighted ensembling: per-(subject, parcel) softmax over member
//! validation Pearson scores with temperature τ.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub tau: f64,
    pub top_n: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { tau: 0.3, top_n: 3 }
    }
}

/// Softmax of `rho / tau` over the member axis of a `(members, subjects, parcels)` array.
pub fn compute_weights(rho: ArrayView3<'_, f64>, tau: f64) -> Result<Array3<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if rho.len_of(Axis(0)) == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("member scores must be finite"));
    }
    let (m, s, p) = rho.dim();
    let mut w = Array3::zeros((m, s, p));
    for si in 0..s {
        for pi in 0..p {
            let max = (0..m).map(|k| rho[[k, si, pi]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..m {
                let e = ((rho[[k, si, pi]] - max) / tau).exp();
                w[[k, si, pi]] = e;
                total += e;
            }
            for k in 0..m {
                w[[k, si, pi]] /= total;
            }
        }
    }
    Ok(w)
}

/// Per-parcel convex combination of `(members, K, P)` predictions under
/// `(members, P)` weights for one subject.
pub fn ensemble_predict(member_preds: ArrayView3<'_, f64>, weights: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, k, p) = member_preds.dim();
    if weights.dim() != (m, p) {
        return Err(Error::shape(format!(
            "weights {:?} do not match {m} members with {p} parcels",
            weights.dim()
        )));
    }
    let mut out = Array2::<f64>::zeros((k, p));
    for mi in 0..m {
        let pred = member_preds.index_axis(Axis(0), mi);
        let w = weights.row(mi);
        out += &(&pred * &w);
    }
    // Rounding in the weighted sum can step a few ulps outside the members' range.
    for ((ki, pi), o) in out.indexed_iter_mut() {
        let col = member_preds.slice(ndarray::s![.., ki, pi]);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        *o = o.clamp(lo, hi);
    }
    Ok(out)
}

/// A trained checkpoint and its validation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub checkpoint: PathBuf,
    pub scores: PathBuf,
    pub val_pearson: f64,
}

/// The `n` best entries by validation Pearson, ties kept in registry order.
pub fn select_top_n(registry: &[RegistryEntry], n: usize) -> Vec<RegistryEntry> {
    let mut idx: Vec<usize> = (0..registry.len()).collect();
    idx.sort_by(|&a, &b| registry[b].val_pearson.total_cmp(&registry[a].val_pearson).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| registry[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub tau: f64,
    pub members: Vec<RegistryEntry>,
}

impl EnsembleManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn two_member_example() {
        let rho = Array3::from_shape_vec((2, 1, 1), vec![0.3, 0.0]).unwrap();
        let w = compute_weights(rho.view(), 0.3).unwrap();
        let e = std::f64::consts::E;
        assert!((w[[0, 0, 0]] - e / (1.0 + e)).abs() < 1e-12);
        assert!((w[[1, 0, 0]] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w[[0, 0, 0]] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn equal_scores_share_weight() {
        let rho = Array3::from_elem((15, 2, 3), 0.2);
        let w = compute_weights(rho.view(), 0.3).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let rho = Array3::zeros((2, 1, 1));
        assert!(compute_weights(rho.view(), 0.0).is_err());
        assert!(compute_weights(rho.view(), -0.3).is_err());
        assert!(compute_weights(rho.view(), f64::NAN).is_err());
    }

    #[test]
    fn vanishing_temperature_selects_argmax_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, p) = (5, 4, 30);
        let rho = random(&mut rng, (m, 1, p));
        let preds = random(&mut rng, (m, k, p));
        let w = compute_weights(rho.view(), 1e-6).unwrap();
        let out = ensemble_predict(preds.view(), w.index_axis(Axis(1), 0)).unwrap();
        for pi in 0..p {
            let best = (0..m).max_by(|&a, &b| rho[[a, 0, pi]].total_cmp(&rho[[b, 0, pi]])).unwrap();
            for ki in 0..k {
                assert_eq!(out[[ki, pi]], preds[[best, ki, pi]]);
            }
        }
    }

    #[test]
    fn single_member_is_identity() {
        let preds = array![[[1.5, -2.0], [0.25, 3.0]]];
        let w = compute_weights(Array3::from_elem((1, 1, 2), 0.4).view(), 0.3).unwrap();
        let out = ensemble_predict(preds.view(), w.index_axis(Axis(1), 0)).unwrap();
        assert_eq!(out, preds.index_axis(Axis(0), 0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let preds = Array3::zeros((2, 3, 4));
        assert!(ensemble_predict(preds.view(), Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn top_n_orders_by_score() {
        let entry = |name: &str, v| RegistryEntry {
            checkpoint: name.into(),
            scores: format!("{name}.csv").into(),
            val_pearson: v,
        };
        let reg = vec![entry("a", 0.1), entry("b", 0.3), entry("c", 0.3), entry("d", 0.2)];
        let top: Vec<_> = select_top_n(&reg, 3).into_iter().map(|e| e.checkpoint).collect();
        assert_eq!(top, vec![PathBuf::from("b"), "c".into(), "d".into()]);
        assert_eq!(select_top_n(&reg, 10).len(), 4);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EnsembleManifest {
            tau: 0.3,
            members: vec![RegistryEntry {
                checkpoint: "m0.ckpt".into(),
                scores: "m0.csv".into(),
                val_pearson: 0.25,
            }],
        };
        let path = dir.path().join("ensemble.json");
        m.write(&path).unwrap();
        assert_eq!(EnsembleManifest::read(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_and_shift_invariant(
            seed in any::<u64>(), m in 1usize..6, p in 1usize..6, tau in 0.01f64..2.0, shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rho = random(&mut rng, (m, 2, p));
            let w = compute_weights(rho.view(), tau).unwrap();
            for s in w.sum_axis(Axis(0)).iter() {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            let shifted = compute_weights((&rho + shift).view(), tau).unwrap();
            for (a, b) in w.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_a_score_never_lowers_its_weight(
            seed in any::<u64>(), m in 2usize..6, bump in 0.0f64..1.0, tau in 0.05f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rho = random(&mut rng, (m, 1, 1));
            let k = rng.gen_range(0..m);
            let before = compute_weights(rho.view(), tau).unwrap()[[k, 0, 0]];
            let mut raised = rho.clone();
            raised[[k, 0, 0]] += bump;
            let after = compute_weights(raised.view(), tau).unwrap()[[k, 0, 0]];
            prop_assert!(after >= before);
        }

        #[test]
        fn output_stays_inside_member_envelope(seed in any::<u64>(), m in 1usize..5, tau in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, p) = (3, 4);
            let preds = random(&mut rng, (m, k, p));
            let rho = random(&mut rng, (m, 1, p));
            let w = compute_weights(rho.view(), tau).unwrap();
            let out = ensemble_predict(preds.view(), w.index_axis(Axis(1), 0)).unwrap();
            for ki in 0..k {
                for pi in 0..p {
                    let col: Array1<f64> = preds.slice(ndarray::s![.., ki, pi]).to_owned();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[[ki, pi]] >= lo && out[[ki, pi]] <= hi);
                }
            }
        }
    }
}
