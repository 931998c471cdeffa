//! Differentiable building blocks with explicit backward passes.
//!
//! Each `forward` returns whatever the matching `backward` needs; gradients
//! are accumulated (`+=`) into a [`ParamStore`] laid out like the model's.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

/// Numeric mode of the forward pass. `Mixed` rounds linear-layer outputs
/// through bfloat16 while keeping parameters and gradients in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Full,
    Mixed,
}

impl Precision {
    pub fn apply(self, a: &mut Array2<f64>) {
        if self == Precision::Mixed {
            a.mapv_inplace(|x| half::bf16::from_f64(x).to_f64());
        }
    }
}

pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub fn normal<R: Rng>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `y = x W + b` with `W` stored `(fan_in, fan_out)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            uniform_fan_in(rng, fan_in, fan_in * fan_out),
        );
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&store.view2(self.weight));
        if let Some(b) = self.bias {
            y += &store.view1(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        self.backward_params(x, dy, grads);
        dy.dot(&store.view2(self.weight).t())
    }

    pub fn backward_params(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut ParamStore) {
        let mut gw = grads.view2_mut(self.weight);
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
        if let Some(b) = self.bias {
            let mut gb = grads.view1_mut(b);
            gb += &dy.sum_axis(Axis(0));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), &[width], vec![1.0; width]);
        let beta = store.zeros(format!("{name}.beta"), &[width]);
        Self { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, w) = x.dim();
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(n);
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / w as f64;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= s;
            inv_std[i] = s;
        }
        let y = &xhat * &store.view1(self.gamma) + &store.view1(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: ArrayView2<'_, f64>,
        grads: &mut ParamStore,
    ) -> Array2<f64> {
        let w = dy.ncols() as f64;
        {
            let mut gg = grads.view1_mut(self.gamma);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = grads.view1_mut(self.beta);
            gb += &dy.sum_axis(Axis(0));
        }
        let dxhat = &dy * &store.view1(self.gamma);
        let mut dx = Array2::zeros(dy.dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let s = cache.inv_std[i] / w;
            let mut out = dx.row_mut(i);
            for j in 0..g.len() {
                out[j] = s * (w * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Row-wise numerically stabilized softmax.
pub fn softmax_rows(a: &mut ArrayViewMut2<'_, f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Given `p = softmax(z)` row-wise and `dL/dp`, returns `dL/dz`.
pub fn softmax_rows_backward(p: ArrayView2<'_, f64>, dp: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(p.dim());
    for i in 0..p.nrows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let inner = pr.dot(&dr);
        let mut out = dz.row_mut(i);
        for j in 0..pr.len() {
            out[j] = pr[j] * (dr[j] - inner);
        }
    }
    dz
}

/// Rotary position tables for interleaved channel pairs `(2i, 2i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotary {
    cos: Array2<f64>,
    sin: Array2<f64>,
}

pub const ROTARY_BASE: f64 = 10_000.0;

impl Rotary {
    pub fn new(max_positions: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head dimension must be even");
        let half = head_dim / 2;
        let mut cos = Array2::zeros((max_positions, half));
        let mut sin = Array2::zeros((max_positions, half));
        for t in 0..max_positions {
            for i in 0..half {
                let theta = t as f64 * base.powf(-((2 * i) as f64) / head_dim as f64);
                cos[[t, i]] = theta.cos();
                sin[[t, i]] = theta.sin();
            }
        }
        Self { cos, sin }
    }

    /// Rotates every row `t` of `x` (`(T, head_dim)`) by position `t`.
    /// `inverse` applies the transpose rotation, which is the adjoint used
    /// in the backward pass.
    pub fn apply(&self, x: &mut ArrayViewMut2<'_, f64>, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            for i in 0..row.len() / 2 {
                let (c, s) = (self.cos[[t, i]], sign * self.sin[[t, i]]);
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rotary_is_orthogonal_and_invertible() {
        let rot = Rotary::new(5, 4, ROTARY_BASE);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.3 - 2.0);
        let mut y = x.clone();
        rot.apply(&mut y.view_mut(), false);
        for t in 0..5 {
            let a: f64 = x.row(t).dot(&x.row(t));
            let b: f64 = y.row(t).dot(&y.row(t));
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(y.row(0), x.row(0));
        rot.apply(&mut y.view_mut(), true);
        assert!(y.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rotary_scores_depend_on_relative_offset() {
        let rot = Rotary::new(8, 2, ROTARY_BASE);
        let q = array![[0.3, -1.2]];
        let k = array![[0.8, 0.5]];
        let score = |tq: usize, tk: usize| {
            let mut qq = Array2::zeros((8, 2));
            let mut kk = Array2::zeros((8, 2));
            qq.row_mut(tq).assign(&q.row(0));
            kk.row_mut(tk).assign(&k.row(0));
            rot.apply(&mut qq.view_mut(), false);
            rot.apply(&mut kk.view_mut(), false);
            qq.row(tq).dot(&kk.row(tk))
        };
        assert!((score(1, 3) - score(4, 6)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        store.data_mut(ln.gamma).copy_from_slice(&normal(&mut rng, 1.0, 5));
        let x = Array2::from_shape_vec((3, 5), normal(&mut rng, 1.0, 15)).unwrap();
        let w = Array2::from_shape_vec((3, 5), normal(&mut rng, 1.0, 15)).unwrap();
        let loss = |x: &Array2<f64>| (&ln.forward(&store, x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(&store, x.view());
        let mut grads = store.zeros_like();
        let dx = ln.backward(&store, &cache, w.view(), &mut grads);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = array![[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]];
        softmax_rows(&mut a.view_mut());
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }
}
