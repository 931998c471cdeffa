//! Synthetic stand-in for a frozen backbone plus measured responses with a
//! known generative mapping.
//!
//! Every layer of every modality is standard normal noise around a fixed
//! per-layer offset vector (the layer's "signature"). Responses depend only
//! on one planted layer per modality: the concatenated planted-layer
//! features go through a linear map, a causal temporal kernel, block
//! averaging onto the TR grid and additive Gaussian noise.

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{pool_to_tr, LayerResolvedFeatures, StimulusWindow, DEFAULT_FRAME_RATE_HZ};
use crate::modality::{Modality, PerModality};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityPlan {
    pub layers: usize,
    pub hidden: usize,
    /// 0-based index of the layer the responses depend on.
    pub planted_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub plans: PerModality<ModalityPlan>,
    /// `(sum of hidden widths, parcels)`, row blocks in fusion order.
    pub planted_map: Array2<f64>,
    pub noise_std: f64,
    /// Causal smoothing weights applied on the frame grid, `kernel[0]` at lag 0.
    pub kernel: Vec<f64>,
    /// Standard deviation of the per-layer offset vectors.
    pub layer_offset_scale: f64,
    pub frames: usize,
    pub k_out: usize,
    pub n_subjects: usize,
    pub frame_rate_hz: f64,
}

impl PlantedSpec {
    /// Builds a spec whose map has i.i.d. normal entries, scaled per modality
    /// by `weights` so that frame-level responses have unit variance. A zero
    /// weight removes a modality from the generative model entirely.
    pub fn with_random_map(
        plans: PerModality<ModalityPlan>,
        parcels: usize,
        weights: PerModality<f64>,
        seed: u64,
    ) -> Self {
        let total: f64 = Modality::ALL
            .iter()
            .map(|&m| weights[m] * weights[m] * plans[m].hidden as f64)
            .sum();
        let norm = if total > 0.0 { total.sqrt() } else { 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_705f_7365_6564);
        let blocks: Vec<Array2<f64>> = Modality::ALL
            .iter()
            .map(|&m| {
                let w = weights[m] / norm;
                Array2::from_shape_simple_fn((plans[m].hidden, parcels), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    w * z
                })
            })
            .collect();
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let planted_map = concatenate(Axis(0), &views).expect("equal parcel counts");
        Self {
            plans,
            planted_map,
            noise_std: 0.0,
            kernel: vec![1.0],
            layer_offset_scale: 0.0,
            frames: 100,
            k_out: 20,
            n_subjects: 1,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        }
    }

    pub fn parcels(&self) -> usize {
        self.planted_map.ncols()
    }

    pub fn input_width(&self) -> usize {
        Modality::ALL.iter().map(|&m| self.plans[m].hidden).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (m, p) in self.plans.iter() {
            if p.layers == 0 || p.hidden == 0 {
                return Err(Error::invalid(format!("{m}: layers and hidden must be >= 1")));
            }
            if p.planted_layer >= p.layers {
                return Err(Error::invalid(format!(
                    "{m}: planted layer {} outside 0..{}",
                    p.planted_layer, p.layers
                )));
            }
        }
        if self.planted_map.nrows() != self.input_width() || self.planted_map.ncols() == 0 {
            return Err(Error::shape(format!(
                "planted map is {:?}, expected ({}, parcels)",
                self.planted_map.dim(),
                self.input_width()
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be a finite non-negative number"));
        }
        if self.kernel.is_empty() || (self.kernel.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("temporal kernel must be non-empty and sum to 1"));
        }
        if !(self.layer_offset_scale >= 0.0 && self.layer_offset_scale.is_finite()) {
            return Err(Error::invalid("layer_offset_scale must be non-negative"));
        }
        if self.k_out == 0 || self.frames < self.k_out {
            return Err(Error::invalid(format!(
                "frames ({}) must be >= k_out ({}) >= 1",
                self.frames, self.k_out
            )));
        }
        if self.n_subjects == 0 {
            return Err(Error::invalid("n_subjects must be >= 1"));
        }
        Ok(())
    }

    /// Responses before noise for the given planted-layer features,
    /// `(frames, width)` -> `(k_out, parcels)`.
    pub fn noiseless_response(&self, planted_inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let z = planted_inputs.dot(&self.planted_map);
        let t = z.nrows();
        let mut smoothed = Array2::zeros(z.dim());
        for (lag, &w) in self.kernel.iter().enumerate() {
            if lag >= t {
                break;
            }
            let mut dst = smoothed.slice_mut(s![lag.., ..]);
            dst.scaled_add(w, &z.slice(s![..t - lag, ..]));
        }
        pool_to_tr(smoothed.view(), self.k_out)
    }
}

/// Draws `n_windows` windows. Window `i` belongs to subject
/// `i % n_subjects`. The random stream does not depend on `noise_std`, so
/// two specs differing only in noise yield identical features.
pub fn generate_planted_dataset(spec: &PlantedSpec, n_windows: usize, seed: u64) -> Result<Vec<StimulusWindow>> {
    spec.validate()?;
    if n_windows == 0 {
        return Err(Error::invalid("n_windows must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: PerModality<Array2<f64>> = PerModality::from_fn(|m| {
        let p = spec.plans[m];
        Array2::from_shape_simple_fn((p.layers, p.hidden), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.layer_offset_scale * z
        })
    });

    let mut windows = Vec::with_capacity(n_windows);
    for i in 0..n_windows {
        let data: PerModality<Array3<f64>> = PerModality::from_fn(|m| {
            let p = spec.plans[m];
            let off = &offsets[m];
            let mut a = Array3::from_shape_simple_fn((p.layers, spec.frames, p.hidden), || {
                StandardNormal.sample(&mut rng)
            });
            for (l, mut layer) in a.outer_iter_mut().enumerate() {
                layer += &off.row(l);
            }
            a
        });
        let planted: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| data[m].index_axis(Axis(0), spec.plans[m].planted_layer))
            .collect();
        let inputs = concatenate(Axis(1), &planted).expect("equal frame counts");
        let mut target = spec.noiseless_response(&inputs)?;
        let noise = Array2::from_shape_simple_fn(target.dim(), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        target.scaled_add(spec.noise_std, &noise);

        let features = PerModality::try_from_fn(|m| {
            LayerResolvedFeatures::new(m, data[m].clone(), spec.frame_rate_hz)
        })?;
        windows.push(StimulusWindow::new(
            format!("w{i:05}"),
            i % spec.n_subjects,
            features,
            target,
        )?);
    }
    Ok(windows)
}

/// Concatenation of the planted-layer features of one window, `(frames, width)`.
pub fn planted_inputs(spec: &PlantedSpec, window: &StimulusWindow) -> Array2<f64> {
    let views: Vec<_> = Modality::ALL
        .iter()
        .map(|&m| window.features[m].layer(spec.plans[m].planted_layer))
        .collect();
    concatenate(Axis(1), &views).expect("equal frame counts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::pearson_per_parcel;

    fn plans(l: usize, d: usize) -> PerModality<ModalityPlan> {
        PerModality::from_fn(|m| ModalityPlan {
            layers: l,
            hidden: d,
            planted_layer: m.index() % l,
        })
    }

    #[test]
    fn identity_map_reproduces_pooled_planted_layer() {
        let p = plans(3, 2);
        let width = 6;
        let mut spec = PlantedSpec::with_random_map(p, width, PerModality::from_fn(|_| 1.0), 1);
        spec.planted_map = Array2::eye(width);
        spec.frames = 8;
        spec.k_out = 4;
        spec.layer_offset_scale = 0.5;
        let w = generate_planted_dataset(&spec, 3, 9).unwrap();
        for win in &w {
            let x = planted_inputs(&spec, win);
            let pooled = pool_to_tr(x.view(), 4).unwrap();
            assert_eq!(win.target, pooled);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut spec = PlantedSpec::with_random_map(plans(4, 3), 5, PerModality::from_fn(|_| 1.0), 3);
        spec.frames = 10;
        spec.k_out = 5;
        spec.n_subjects = 2;
        let a = generate_planted_dataset(&spec, 4, 77).unwrap();
        let b = generate_planted_dataset(&spec, 4, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].subject, 1);
        let c = generate_planted_dataset(&spec, 4, 78).unwrap();
        assert_ne!(a[0].target, c[0].target);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let mut spec = PlantedSpec::with_random_map(plans(1, 2), 3, PerModality::from_fn(|_| 1.0), 5);
        spec.frames = 50;
        spec.k_out = 50;
        let clean = generate_planted_dataset(&spec, 240, 11).unwrap();
        let sigma = 0.7;
        spec.noise_std = sigma;
        let noisy = generate_planted_dataset(&spec, 240, 11).unwrap();
        // Monte-Carlo variance oracle over 12000 samples per parcel.
        for p in 0..3 {
            let diffs: Vec<f64> = clean
                .iter()
                .zip(&noisy)
                .flat_map(|(a, b)| (0..50).map(move |k| b.target[[k, p]] - a.target[[k, p]]))
                .collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "parcel {p}: var {var}");
        }
    }

    #[test]
    fn noiseless_targets_are_linear_in_planted_layer() {
        let mut spec = PlantedSpec::with_random_map(plans(3, 2), 4, PerModality::from_fn(|_| 1.0), 2);
        spec.frames = 12;
        spec.k_out = 6;
        spec.kernel = vec![0.6, 0.4];
        let w = generate_planted_dataset(&spec, 20, 4).unwrap();
        // Oracle fit: smooth + pool the planted inputs, then least squares.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for win in &w {
            let x = planted_inputs(&spec, win);
            let mut sm = Array2::zeros(x.dim());
            for t in 0..x.nrows() {
                for (lag, &k) in spec.kernel.iter().enumerate() {
                    if t >= lag {
                        let row = &sm.row(t) + &(&x.row(t - lag) * k);
                        sm.row_mut(t).assign(&row);
                    }
                }
            }
            xs.push(pool_to_tr(sm.view(), 6).unwrap());
            ys.push(win.target.clone());
        }
        let xv: Vec<_> = xs.iter().map(|a| a.view()).collect();
        let yv: Vec<_> = ys.iter().map(|a| a.view()).collect();
        let x = concatenate(Axis(0), &xv).unwrap();
        let y = concatenate(Axis(0), &yv).unwrap();
        let xm = nalgebra::DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]]);
        let ym = nalgebra::DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[[i, j]]);
        let sol = xm.clone().svd(true, true).solve(&ym, 1e-12).unwrap();
        let fit = &xm * sol;
        let pred = Array2::from_shape_fn(y.dim(), |(i, j)| fit[(i, j)]);
        let r = pearson_per_parcel(pred.view(), y.view()).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-6), "{r}");
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = PlantedSpec::with_random_map(plans(2, 2), 2, PerModality::from_fn(|_| 1.0), 0);
        spec.kernel = vec![0.5, 0.2];
        assert!(generate_planted_dataset(&spec, 1, 0).is_err());
        spec.kernel = vec![1.0];
        spec.plans.text.planted_layer = 2;
        assert!(generate_planted_dataset(&spec, 1, 0).is_err());
        spec.plans.text.planted_layer = 0;
        assert!(generate_planted_dataset(&spec, 0, 0).is_err());
    }
}
