//! Linear encoding baseline: layer-averaged features on the output grid,
//! a lagged design, an optional sparse random projection, and multi-output
//! ridge regression with per-parcel leave-one-out selection of the penalty.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::{pearson_per_parcel, ScoreTable};
use crate::feature_store::{pool_to_tr, Dataset};
use crate::layer_gating::pool_mean;
use crate::modality::ModalitySet;
use crate::{Error, Result};

/// `n` values spaced evenly in log10 between `lo` and `hi`, both included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == n {
                hi
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeDesign {
    pub lags: Vec<i64>,
    /// Target width of the sparse projection; `None` disables it.
    pub projection_dim: Option<usize>,
    pub lambdas: Vec<f64>,
    pub projection_seed: u64,
}

impl Default for RidgeDesign {
    fn default() -> Self {
        Self {
            lags: vec![-4, -3, -2, -1, 0],
            projection_dim: Some(1024),
            lambdas: log_grid(1e-2, 1e7, 99),
            projection_seed: 0,
        }
    }
}

impl RidgeDesign {
    pub fn validate(&self) -> Result<()> {
        if self.lags.is_empty() || self.lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lags must be non-empty and strictly ascending"));
        }
        if self.lambdas.is_empty() || self.lambdas.windows(2).any(|w| w[0] >= w[1]) || self.lambdas[0] <= 0.0 {
            return Err(Error::config("lambda grid must be positive and strictly increasing"));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::config("projection_dim must be positive"));
        }
        Ok(())
    }
}

/// Row `t` holds `features[t + lag]` for each lag in order, zero when out of range.
pub fn build_lagged_design(features: ArrayView2<'_, f64>, lags: &[i64]) -> Array2<f64> {
    let (n, d) = features.dim();
    let mut out = Array2::zeros((n, lags.len() * d));
    for (j, &lag) in lags.iter().enumerate() {
        for t in 0..n {
            let src = t as i64 + lag;
            if (0..n as i64).contains(&src) {
                out.slice_mut(s![t, j * d..(j + 1) * d])
                    .assign(&features.row(src as usize));
            }
        }
    }
    out
}

/// Sparse sign projection: each entry is `+s` or `-s` with probability
/// `rho/2` and zero otherwise, with `rho = 1/sqrt(d_in)` and
/// `s = 1/sqrt(rho * k)`, so `E|xP|^2 = |x|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseProjection {
    /// Non-zeros of each input row as `(output column, value)`.
    rows: Vec<Vec<(usize, f64)>>,
    out_dim: usize,
}

impl SparseProjection {
    pub fn new(d_in: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = 1.0 / (d_in as f64).sqrt();
        let scale = 1.0 / (rho * out_dim as f64).sqrt();
        let rows = (0..d_in)
            .map(|_| {
                (0..out_dim)
                    .filter_map(|j| {
                        let u: f64 = rng.gen();
                        if u < rho / 2.0 {
                            Some((j, scale))
                        } else if u < rho {
                            Some((j, -scale))
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Self { rows, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows.len(), self.out_dim));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[[i, j]] = v;
            }
        }
        m
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out_dim));
        for (n, xr) in x.rows().into_iter().enumerate() {
            let mut o = out.row_mut(n);
            for (i, &xi) in xr.iter().enumerate() {
                if xi != 0.0 {
                    for &(j, v) in &self.rows[i] {
                        o[j] += xi * v;
                    }
                }
            }
        }
        out
    }
}

/// Projects `x` to `design.projection_dim` columns, or returns it unchanged
/// when the projection is disabled or `x` is already narrower.
pub fn sparse_project(x: ArrayView2<'_, f64>, design: &RidgeDesign) -> Array2<f64> {
    match design.projection_dim {
        Some(k) if x.ncols() >= k => SparseProjection::new(x.ncols(), k, design.projection_seed).apply(x),
        _ => x.to_owned(),
    }
}

/// Fitted multi-output ridge model with per-column penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub x_mean: Array1<f64>,
    pub y_mean: Array1<f64>,
    pub weights: Array2<f64>,
    pub chosen_lambda: Array1<f64>,
    /// Leave-one-out mean squared error, `(grid, P)`.
    pub loo_mse: Array2<f64>,
}

impl RidgeFit {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.x_mean).dot(&self.weights) + &self.y_mean
    }
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Orthonormal basis `U` of the centered design's column space with the
/// matching eigenvalues of `Xc Xc^T`, computed from whichever Gram matrix
/// is smaller.
fn spectral_basis(xc: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, f) = xc.dim();
    let (vecs, vals, via_features) = if f <= n {
        let eig = SymmetricEigen::new(to_na(&xc.t().dot(xc)));
        (eig.eigenvectors, eig.eigenvalues, true)
    } else {
        let eig = SymmetricEigen::new(to_na(&xc.dot(&xc.t())));
        (eig.eigenvectors, eig.eigenvalues, false)
    };
    let top = vals.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > top * 1e-12 && vals[i] > 0.0).collect();
    let vecs = from_na(&vecs);
    let mut u = Array2::zeros((n, keep.len()));
    let mut e = Array1::zeros(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        e[c] = vals[i];
        if via_features {
            let col = xc.dot(&vecs.column(i)) / vals[i].sqrt();
            u.column_mut(c).assign(&col);
        } else {
            u.column_mut(c).assign(&vecs.column(i));
        }
    }
    (u, e)
}

fn center(a: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let mean = a.mean_axis(Axis(0)).expect("non-empty");
    (&a - &mean, mean)
}

/// Centered design in spectral form, shared across the penalty grid.
struct Spectral {
    xc: Array2<f64>,
    u: Array2<f64>,
    u2: Array2<f64>,
    e: Array1<f64>,
    uty: Array2<f64>,
    yc: Array2<f64>,
}

impl Spectral {
    fn new(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (Self, Array1<f64>, Array1<f64>) {
        let (xc, x_mean) = center(x);
        let (yc, y_mean) = center(y);
        let (u, e) = spectral_basis(&xc);
        let uty = u.t().dot(&yc);
        let u2 = u.mapv(|v| v * v);
        (Self { xc, u, u2, e, uty, yc }, x_mean, y_mean)
    }

    /// `e_i = (y_i - yhat_i) / (1 - h_ii)`; the intercept adds `1/N` to
    /// every leverage.
    fn loo_residuals(&self, lam: f64) -> Result<Array2<f64>> {
        let n = self.yc.nrows() as f64;
        let shrink = self.e.mapv(|ev| ev / (ev + lam));
        let fitted = self.u.dot(&(&self.uty * &shrink.view().insert_axis(Axis(1))));
        let h = self.u2.dot(&shrink) + 1.0 / n;
        let mut r = &self.yc - &fitted;
        for (i, mut row) in r.rows_mut().into_iter().enumerate() {
            let denom = 1.0 - h[i];
            if denom <= 1e-12 {
                return Err(Error::invalid("leverage of one; leave-one-out undefined"));
            }
            row /= denom;
        }
        Ok(r)
    }
}

/// Closed-form leave-one-out residuals of ridge with an unpenalized
/// intercept, one `(N, P)` matrix per penalty in `lambdas`.
pub fn loo_residuals(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, lambdas: &[f64]) -> Result<Vec<Array2<f64>>> {
    let (sp, _, _) = Spectral::new(x, y);
    lambdas.iter().map(|&lam| sp.loo_residuals(lam)).collect()
}

/// Fits ridge on `(x, y)`, choosing the penalty per output column by
/// leave-one-out error (ties resolve to the smaller penalty).
pub fn fit_ridge_loocv(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, lambdas: &[f64]) -> Result<RidgeFit> {
    let (n, _) = x.dim();
    if n < 2 {
        return Err(Error::invalid("ridge needs at least two rows"));
    }
    if y.nrows() != n {
        return Err(Error::shape(format!("x has {n} rows, y has {}", y.nrows())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("ridge inputs must be finite"));
    }
    if lambdas.is_empty() || lambdas.iter().any(|&l| l <= 0.0) {
        return Err(Error::invalid("lambda grid must be non-empty and positive"));
    }
    let (sp, x_mean, y_mean) = Spectral::new(x, y);
    let p = y.ncols();
    let mut loo_mse = Array2::zeros((lambdas.len(), p));
    for (g, &lam) in lambdas.iter().enumerate() {
        let r = sp.loo_residuals(lam)?;
        loo_mse.row_mut(g).assign(&(r.mapv(|v| v * v).sum_axis(Axis(0)) / n as f64));
    }
    let mut chosen = Array1::zeros(p);
    let mut chosen_idx = vec![0usize; p];
    for j in 0..p {
        let col = loo_mse.column(j);
        let mut best = 0;
        for g in 1..lambdas.len() {
            if col[g] < col[best] {
                best = g;
            }
        }
        chosen_idx[j] = best;
        chosen[j] = lambdas[best];
    }
    // beta = Xc^T U diag(1/(e+lam)) U^T Yc, column by column
    let xtu = sp.xc.t().dot(&sp.u);
    let mut weights = Array2::zeros((x.ncols(), p));
    for j in 0..p {
        let lam = lambdas[chosen_idx[j]];
        let coef = &sp.uty.column(j) / &sp.e.mapv(|ev| ev + lam);
        weights.column_mut(j).assign(&xtu.dot(&coef));
    }
    Ok(RidgeFit {
        x_mean,
        y_mean,
        weights,
        chosen_lambda: chosen,
        loo_mse,
    })
}

/// Layer-averaged features of one window pooled to the output grid and
/// concatenated over `modalities` (fusion order).
pub fn window_features(data: &Dataset, window: usize, modalities: ModalitySet) -> Result<Array2<f64>> {
    let w = &data.windows[window];
    let pooled = modalities
        .iter()
        .map(|m| pool_to_tr(pool_mean(w.features[m].data()).view(), data.k_out))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = pooled.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("equal rows"))
}

/// Per-subject outcome of [`run_baseline`].
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub scores: ScoreTable,
    /// Chosen penalty per parcel, one vector per subject.
    pub chosen_lambda: Vec<Array1<f64>>,
}

/// Design rows for a list of windows: per-window representation, lagged
/// within the window, stacked, then projected.
pub fn design_rows(reps: &[Array2<f64>], design: &RidgeDesign) -> Array2<f64> {
    let lagged: Vec<_> = reps.iter().map(|r| build_lagged_design(r.view(), &design.lags)).collect();
    let views: Vec<_> = lagged.iter().map(|a| a.view()).collect();
    let x = concatenate(Axis(0), &views).expect("equal widths");
    sparse_project(x.view(), design)
}

/// Fits one ridge model per subject on training windows and scores it on
/// validation windows. `reps[i]` is the `(K, F)` representation of window `i`.
pub fn fit_and_score(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    reps: &[Array2<f64>],
    design: &RidgeDesign,
) -> Result<BaselineResult> {
    design.validate()?;
    let mut pearson = Array2::zeros((data.n_subjects, data.parcels));
    let mut chosen_lambda = Vec::with_capacity(data.n_subjects);
    for subject in 0..data.n_subjects {
        let tr: Vec<usize> = train.iter().copied().filter(|&i| data.windows[i].subject == subject).collect();
        let va: Vec<usize> = val.iter().copied().filter(|&i| data.windows[i].subject == subject).collect();
        if tr.is_empty() || va.is_empty() {
            return Err(Error::invalid(format!("subject {subject} lacks training or validation windows")));
        }
        let stack = |idx: &[usize]| -> (Array2<f64>, Array2<f64>) {
            let r: Vec<_> = idx.iter().map(|&i| reps[i].clone()).collect();
            let ys: Vec<_> = idx.iter().map(|&i| data.windows[i].target.view()).collect();
            (design_rows(&r, design), concatenate(Axis(0), &ys).expect("equal widths"))
        };
        let (xt, yt) = stack(&tr);
        let (xv, yv) = stack(&va);
        let fit = fit_ridge_loocv(xt.view(), yt.view(), &design.lambdas)?;
        let pred = fit.predict(xv.view());
        pearson.row_mut(subject).assign(&pearson_per_parcel(pred.view(), yv.view())?);
        chosen_lambda.push(fit.chosen_lambda);
    }
    Ok(BaselineResult {
        scores: ScoreTable::new(pearson),
        chosen_lambda,
    })
}

/// The full baseline: layer-mean pooling, grid alignment, lags, projection
/// and leave-one-out ridge, scored on the validation windows.
pub fn run_baseline(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    modalities: ModalitySet,
    design: &RidgeDesign,
) -> Result<BaselineResult> {
    let reps = (0..data.len())
        .map(|i| window_features(data, i, modalities))
        .collect::<Result<Vec<_>>>()?;
    fit_and_score(data, train, val, &reps, design)
}

/// Histogram of chosen penalties over grid bins (counts per grid value).
pub fn lambda_histogram(chosen: &[Array1<f64>], grid: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; grid.len()];
    for l in chosen.iter().flat_map(|c| c.iter()) {
        if let Some(i) = grid.iter().position(|g| g == l) {
            counts[i] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use proptest::prelude::*;

    fn random(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Array2<f64> {
        Array2::from_shape_vec((n, f), normal(rng, 1.0, n * f)).unwrap()
    }

    /// Leave row `i` out, refit ridge with an intercept on the rest by
    /// solving the normal equations, and predict row `i`.
    fn brute_force_loo(x: &Array2<f64>, y: &Array2<f64>, lam: f64) -> Array2<f64> {
        let n = x.nrows();
        let mut res = Array2::zeros(y.dim());
        for i in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let xs = x.select(Axis(0), &keep);
            let ys = y.select(Axis(0), &keep);
            let xm = xs.mean_axis(Axis(0)).unwrap();
            let ym = ys.mean_axis(Axis(0)).unwrap();
            let xc = &xs - &xm;
            let yc = &ys - &ym;
            let a = to_na(&(xc.t().dot(&xc) + Array2::<f64>::eye(x.ncols()) * lam));
            let b = to_na(&xc.t().dot(&yc));
            let w = from_na(&a.lu().solve(&b).unwrap());
            let pred = (&x.row(i) - &xm).dot(&w) + &ym;
            res.row_mut(i).assign(&(&y.row(i) - &pred));
        }
        res
    }

    #[test]
    fn tiny_loo_matches_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 6, 2);
        let y = random(&mut rng, 6, 2);
        let grid = [1e-2, 0.3, 10.0];
        let closed = loo_residuals(x.view(), y.view(), &grid).unwrap();
        for (g, &lam) in grid.iter().enumerate() {
            let brute = brute_force_loo(&x, &y, lam);
            assert!(closed[g].iter().zip(brute.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn closed_form_loo_equals_refits(seed in 0u64..10_000, n in 3usize..=20, f in 1usize..30, p in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, n, f);
            let y = random(&mut rng, n, p);
            let grid = [0.05, 2.0, 300.0];
            let closed = loo_residuals(x.view(), y.view(), &grid).unwrap();
            for (g, &lam) in grid.iter().enumerate() {
                let brute = brute_force_loo(&x, &y, lam);
                for (a, b) in closed[g].iter().zip(brute.iter()) {
                    prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn noiseless_map_picks_smallest_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 80, 5);
        let w = random(&mut rng, 5, 3);
        let y = x.dot(&w);
        let grid = log_grid(1e-2, 1e7, 99);
        let fit = fit_ridge_loocv(x.view(), y.view(), &grid).unwrap();
        assert!(fit.chosen_lambda.iter().all(|&l| l == 1e-2));
        let r = pearson_per_parcel(fit.predict(x.view()).view(), y.view()).unwrap();
        assert!(r.iter().all(|&v| v >= 0.999));
    }

    #[test]
    fn pure_noise_picks_large_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 60, 10);
        let y = random(&mut rng, 60, 20);
        let grid = log_grid(1e-2, 1e7, 99);
        let fit = fit_ridge_loocv(x.view(), y.view(), &grid).unwrap();
        let median = grid[49];
        let large = fit.chosen_lambda.iter().filter(|&&l| l >= median).count();
        assert!(large * 2 > fit.chosen_lambda.len(), "{:?}", fit.chosen_lambda);
    }

    #[test]
    fn weights_shrink_with_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 30, 6);
        let y = x.dot(&random(&mut rng, 6, 2)) + random(&mut rng, 30, 2);
        let lo = fit_ridge_loocv(x.view(), y.view(), &[1e-2]).unwrap();
        let hi = fit_ridge_loocv(x.view(), y.view(), &[1e7]).unwrap();
        let mid = fit_ridge_loocv(x.view(), y.view(), &[1e-2 * (1.0 + 1e-9)]).unwrap();
        let norm = |f: &RidgeFit| f.weights.mapv(|v| v * v).sum().sqrt();
        assert!(norm(&hi) < norm(&lo));
        assert!((norm(&mid) - norm(&lo)).abs() < 1e-6);
    }

    #[test]
    fn wide_design_uses_row_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 8, 40);
        let y = random(&mut rng, 8, 2);
        let fit = fit_ridge_loocv(x.view(), y.view(), &[0.5]).unwrap();
        // compare against the primal solution
        let xc = &x - &x.mean_axis(Axis(0)).unwrap();
        let yc = &y - &y.mean_axis(Axis(0)).unwrap();
        let a = to_na(&(xc.t().dot(&xc) + Array2::<f64>::eye(40) * 0.5));
        let w = from_na(&a.lu().solve(&to_na(&xc.t().dot(&yc))).unwrap());
        assert!(fit.weights.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn lagged_design_examples() {
        let f = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let lags = [-4, -3, -2, -1, 0];
        let d = build_lagged_design(f.view(), &lags);
        assert_eq!(d.row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.row(2).to_vec(), vec![0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(build_lagged_design(f.view(), &[0]), f);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 7, 3);
        let lags = [-2, 0, 1];
        let d = build_lagged_design(x.view(), &lags);
        for t in 0..7 {
            for (j, lag) in lags.iter().enumerate() {
                for c in 0..3 {
                    let src = t as i64 + lag;
                    let expect = if src < 0 || src >= 7 { 0.0 } else { x[[src as usize, c]] };
                    assert_eq!(d[[t, j * 3 + c]], expect);
                }
            }
        }
    }

    #[test]
    fn projection_preserves_norm_on_average() {
        let p = SparseProjection::new(2048, 1024, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 1000, 2048);
        let y = p.apply(x.view());
        let ratio = y.mapv(|v| v * v).sum() / x.mapv(|v| v * v).sum();
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        assert_eq!(p.apply(Array2::zeros((2, 2048)).view()), Array2::<f64>::zeros((2, 1024)));
        assert_eq!(SparseProjection::new(2048, 1024, 7), p);
        assert!(y.iter().zip(x.dot(&p.to_dense()).iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn narrow_inputs_pass_through() {
        let x = Array2::from_elem((3, 10), 1.5);
        assert_eq!(sparse_project(x.view(), &RidgeDesign::default()), x);
    }

    #[test]
    fn default_grid_spans_exact_bounds() {
        let g = RidgeDesign::default().lambdas;
        assert_eq!(g.len(), 99);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[98], 1e7);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(((g[1] / g[0]).log10() - 9.0 / 98.0).abs() < 1e-12);
    }
}
