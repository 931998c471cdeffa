//! Cached layer-resolved features, the planted-ground-truth generator and
//! alignment of the frame grid to the fMRI sampling grid.

mod dataset;
mod format;
mod planted;

pub use dataset::{Dataset, Manifest, ManifestEntry, FeaturePaths, Split, TargetNorm};
pub use format::{read_features, read_matrix, write_features, write_matrix, FEATURE_MAGIC, FORMAT_VERSION, MATRIX_MAGIC};
pub use planted::{generate_planted_dataset, planted_inputs, ModalityPlan, PlantedSpec};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::modality::{Modality, PerModality};
use crate::{Error, Result};

pub const DEFAULT_FRAME_RATE_HZ: f64 = 2.0;

/// Hidden states of every backbone layer for one modality of one window,
/// shaped `(layers, frames, hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResolvedFeatures {
    modality: Modality,
    data: Array3<f64>,
    frame_rate_hz: f64,
}

impl LayerResolvedFeatures {
    pub fn new(modality: Modality, data: Array3<f64>, frame_rate_hz: f64) -> Result<Self> {
        let (l, t, d) = data.dim();
        if l == 0 || t == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "feature tensor must be non-empty, got {l}x{t}x{d}"
            )));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::invalid(format!("frame rate {frame_rate_hz} must be positive")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature tensor contains non-finite entries"));
        }
        Ok(Self {
            modality,
            data,
            frame_rate_hz,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn layers(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn hidden(&self) -> usize {
        self.data.dim().2
    }

    /// Frames of a single layer, `(frames, hidden)`.
    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), l)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusWindow {
    pub id: String,
    pub subject: usize,
    pub features: PerModality<LayerResolvedFeatures>,
    /// `(k_out, parcels)` response matrix on the TR grid.
    pub target: Array2<f64>,
}

impl StimulusWindow {
    pub fn new(
        id: impl Into<String>,
        subject: usize,
        features: PerModality<LayerResolvedFeatures>,
        target: Array2<f64>,
    ) -> Result<Self> {
        let frames = features.vision.frames();
        for (m, f) in features.iter() {
            if f.modality() != m {
                return Err(Error::invalid(format!(
                    "{m} slot holds {} features",
                    f.modality()
                )));
            }
            if f.frames() != frames {
                return Err(Error::invalid(format!(
                    "modalities disagree on frame count ({} vs {frames})",
                    f.frames()
                )));
            }
        }
        let (k, p) = target.dim();
        if k == 0 || p == 0 {
            return Err(Error::invalid("target must be non-empty"));
        }
        if frames < k {
            return Err(Error::invalid(format!(
                "window has {frames} frames but {k} target samples; pooling must reduce"
            )));
        }
        if target.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("target contains non-finite entries"));
        }
        Ok(Self {
            id: id.into(),
            subject,
            features,
            target,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.vision.frames()
    }
}

/// Index range `[start, end)` of input rows averaged into output row `j`.
pub fn pool_range(frames: usize, k_out: usize, j: usize) -> (usize, usize) {
    (j * frames / k_out, (j + 1) * frames / k_out)
}

/// Adaptive average pooling along time: output row `j` is the mean of input
/// rows `floor(j*T/k) .. floor((j+1)*T/k)`.
pub fn pool_to_tr(frames: ArrayView2<'_, f64>, k_out: usize) -> Result<Array2<f64>> {
    let (t, d) = frames.dim();
    if k_out == 0 || t < k_out {
        return Err(Error::invalid(format!(
            "cannot pool {t} frames to {k_out} samples"
        )));
    }
    let mut out = Array2::zeros((k_out, d));
    for j in 0..k_out {
        let (a, b) = pool_range(t, k_out, j);
        let block = frames.slice(s![a..b, ..]);
        let mean = block.sum_axis(Axis(0)) / (b - a) as f64;
        out.row_mut(j).assign(&mean);
    }
    Ok(out)
}

/// Adjoint of [`pool_to_tr`]: spreads each output gradient row evenly over
/// its source frames.
pub fn pool_to_tr_backward(grad: ArrayView2<'_, f64>, frames: usize) -> Array2<f64> {
    let (k_out, d) = grad.dim();
    let mut out = Array2::zeros((frames, d));
    for j in 0..k_out {
        let (a, b) = pool_range(frames, k_out, j);
        let share = &grad.row(j) / (b - a) as f64;
        for t in a..b {
            out.row_mut(t).assign(&share);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn pool_pairs() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(pool_to_tr(x.view(), 2).unwrap(), array![[1.5], [3.5]]);
    }

    #[test]
    fn pool_identity() {
        let x = array![[1.0, -1.0], [2.0, 5.0], [3.0, 0.5]];
        assert_eq!(pool_to_tr(x.view(), 3).unwrap(), x);
    }

    #[test]
    fn pool_uneven_partition() {
        // floor(0*5/2)=0, floor(5/2)=2, floor(10/2)=5 -> rows {0,1} and {2,3,4}
        let x = array![[1.0], [2.0], [3.0], [4.0], [6.0]];
        let got = pool_to_tr(x.view(), 2).unwrap();
        assert_eq!(pool_range(5, 2, 0), (0, 2));
        assert_eq!(pool_range(5, 2, 1), (2, 5));
        assert_eq!(got, array![[1.5], [13.0 / 3.0]]);
    }

    #[test]
    fn pool_rejects_upsampling() {
        let x = Array2::<f64>::zeros((2, 1));
        assert!(pool_to_tr(x.view(), 3).is_err());
        assert!(pool_to_tr(x.view(), 0).is_err());
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Array2::from_shape_fn((7, 2), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.0);
        let g = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 0.5);
        let lhs = (&pool_to_tr(x.view(), 3).unwrap() * &g).sum();
        let rhs = (&x * &pool_to_tr_backward(g.view(), 7)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn features_reject_empty_and_nan() {
        assert!(LayerResolvedFeatures::new(Modality::Text, Array3::zeros((0, 1, 1)), 2.0).is_err());
        let mut a = Array3::zeros((1, 2, 2));
        a[[0, 1, 1]] = f64::NAN;
        assert!(LayerResolvedFeatures::new(Modality::Text, a, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn pool_preserves_column_mean_for_even_blocks(k in 1usize..6, per in 1usize..5, d in 1usize..4, seed in 0u64..1000) {
            let t = k * per;
            let x = Array2::from_shape_fn((t, d), |(i, j)| ((i * 31 + j * 7 + seed as usize) % 17) as f64 - 8.0);
            let y = pool_to_tr(x.view(), k).unwrap();
            for j in 0..d {
                let a = x.column(j).mean().unwrap();
                let b = y.column(j).mean().unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_ranges_tile(t in 1usize..60, k_frac in 0.0f64..1.0) {
            let k = 1 + ((t - 1) as f64 * k_frac) as usize;
            let mut next = 0;
            for j in 0..k {
                let (a, b) = pool_range(t, k, j);
                prop_assert_eq!(a, next);
                prop_assert!(b > a);
                next = b;
            }
            prop_assert_eq!(next, t);
        }
    }
}
