//! Aggregation over the backbone layer axis.
//!
//! The learned pooler keeps a bank of `n_q` query vectors per modality. At
//! every frame each query attends over the `L` layer tokens of that frame
//! with multi-head scaled dot-product attention; head outputs are
//! concatenated per query, passed through an output projection, and the
//! `n_q` query outputs are concatenated along the hidden axis. There is no
//! positional encoding over layers, so layer identity enters only through
//! the token contents.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{normal, softmax_rows, softmax_rows_backward, Linear};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolerKind {
    #[default]
    Xattn,
    Mean,
    DepthGroups,
}

impl FromStr for PoolerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xattn" => Ok(PoolerKind::Xattn),
            "mean" => Ok(PoolerKind::Mean),
            "depth_groups" => Ok(PoolerKind::DepthGroups),
            other => Err(Error::config(format!(
                "unknown pooler {other:?} (expected xattn, mean or depth_groups)"
            ))),
        }
    }
}

impl fmt::Display for PoolerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolerKind::Xattn => "xattn",
            PoolerKind::Mean => "mean",
            PoolerKind::DepthGroups => "depth_groups",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolerConfig {
    pub n_queries: usize,
    pub heads: usize,
    pub attention_dropout: f64,
}

impl Default for PoolerConfig {
    fn default() -> Self {
        Self {
            n_queries: 24,
            heads: 4,
            attention_dropout: 0.2,
        }
    }
}

impl PoolerConfig {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::config("n_queries must be >= 1"));
        }
        if self.heads == 0 || hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {hidden} is not divisible by {} pooler heads",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::config("attention_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learned latent-query cross-attention over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionPooler {
    pub queries: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_queries: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolerCache {
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    /// Post-softmax weights `(T, heads, n_q, L)` before dropout.
    probs: Array4<f64>,
    /// Dropout multipliers (0 or 1/(1-p)), same shape as `probs`.
    mask: Option<Array4<f64>>,
    mixed: Array2<f64>,
    frames: usize,
    layers: usize,
}

impl CrossAttentionPooler {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, cfg: &PoolerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(hidden)?;
        let queries = store.add(
            format!("{name}.queries"),
            &[cfg.n_queries, hidden],
            normal(rng, 1.0 / (hidden as f64).sqrt(), cfg.n_queries * hidden),
        );
        let key = Linear::new(store, &format!("{name}.key"), hidden, hidden, false, rng);
        let value = Linear::new(store, &format!("{name}.value"), hidden, hidden, true, rng);
        let output = Linear::new(store, &format!("{name}.out"), hidden, hidden, true, rng);
        Ok(Self {
            queries,
            key,
            value,
            output,
            n_queries: cfg.n_queries,
            heads: cfg.heads,
            hidden,
            dropout: cfg.attention_dropout,
        })
    }

    pub fn output_width(&self) -> usize {
        self.n_queries * self.hidden
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Pools `(L, T, d)` features to `(T, n_q*d)`.
    ///
    /// Dropout on the attention probabilities is applied only when a
    /// `dropout_rng` is supplied (training). When `capture` is set the
    /// post-softmax weights `(T, heads, n_q, L)` are returned as well.
    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        features: ArrayView3<'_, f64>,
        capture: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, Option<Array4<f64>>, PoolerCache)> {
        let (layers, frames, d) = features.dim();
        if d != self.hidden {
            return Err(Error::shape(format!(
                "pooler expects hidden width {}, features have {d}",
                self.hidden
            )));
        }
        let (nq, h, dh) = (self.n_queries, self.heads, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        // Row t*L + l holds layer l at frame t.
        let tokens = features
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((frames * layers, d))
            .expect("standard layout");
        let keys = self.key.forward(store, tokens.view());
        let values = self.value.forward(store, tokens.view());
        let queries = store.view2(self.queries);

        let mut probs = Array4::zeros((frames, h, nq, layers));
        let mut mask = None;
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = 1.0 / (1.0 - self.dropout);
                let p = self.dropout;
                mask = Some(Array4::from_shape_simple_fn((frames, h, nq, layers), || {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }));
            }
        }

        let mut mixed = Array2::zeros((frames * nq, d));
        for t in 0..frames {
            let rows = t * layers..(t + 1) * layers;
            for k in 0..h {
                let cols = k * dh..(k + 1) * dh;
                let q = queries.slice(s![.., cols.clone()]);
                let kt = keys.slice(s![rows.clone(), cols.clone()]);
                let vt = values.slice(s![rows.clone(), cols.clone()]);
                let mut logits = q.dot(&kt.t()) * scale;
                softmax_rows(&mut logits.view_mut());
                probs.slice_mut(s![t, k, .., ..]).assign(&logits);
                let weights = match &mask {
                    Some(m) => &logits * &m.slice(s![t, k, .., ..]),
                    None => logits,
                };
                let out = weights.dot(&vt);
                mixed
                    .slice_mut(s![t * nq..(t + 1) * nq, cols])
                    .assign(&out);
            }
        }
        let pooled = self
            .output
            .forward(store, mixed.view())
            .into_shape_with_order((frames, nq * d))
            .expect("standard layout");
        let captured = capture.then(|| probs.clone());
        Ok((
            pooled,
            captured,
            PoolerCache {
                tokens,
                keys,
                values,
                probs,
                mask,
                mixed,
                frames,
                layers,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/d(pooled)` of shape `(T, n_q*d)`.
    pub fn backward(&self, store: &ParamStore, cache: &PoolerCache, d_pooled: &Array2<f64>, grads: &mut ParamStore) {
        let (nq, h, dh, d) = (self.n_queries, self.heads, self.head_dim(), self.hidden);
        let (frames, layers) = (cache.frames, cache.layers);
        let scale = 1.0 / (dh as f64).sqrt();
        let d_out = d_pooled
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((frames * nq, d))
            .expect("standard layout");
        let d_mixed = self.output.backward(store, cache.mixed.view(), d_out.view(), grads);

        let queries = store.view2(self.queries);
        let mut d_queries = Array2::<f64>::zeros((nq, d));
        let mut d_keys = Array2::<f64>::zeros(cache.keys.dim());
        let mut d_values = Array2::<f64>::zeros(cache.values.dim());
        for t in 0..frames {
            let rows = t * layers..(t + 1) * layers;
            for k in 0..h {
                let cols = k * dh..(k + 1) * dh;
                let p = cache.probs.slice(s![t, k, .., ..]);
                let d_o = d_mixed.slice(s![t * nq..(t + 1) * nq, cols.clone()]);
                let vt = cache.values.slice(s![rows.clone(), cols.clone()]);
                let kt = cache.keys.slice(s![rows.clone(), cols.clone()]);

                let (weights, mut d_p) = match &cache.mask {
                    Some(m) => {
                        let m = m.slice(s![t, k, .., ..]);
                        (&p * &m, &d_o.dot(&vt.t()) * &m)
                    }
                    None => (p.to_owned(), d_o.dot(&vt.t())),
                };
                d_values
                    .slice_mut(s![rows.clone(), cols.clone()])
                    .scaled_add(1.0, &weights.t().dot(&d_o));
                d_p = softmax_rows_backward(p, d_p.view());
                let q = queries.slice(s![.., cols.clone()]);
                d_queries
                    .slice_mut(s![.., cols.clone()])
                    .scaled_add(scale, &d_p.dot(&kt));
                d_keys
                    .slice_mut(s![rows.clone(), cols])
                    .scaled_add(scale, &d_p.t().dot(&q));
            }
        }
        {
            let mut gq = grads.view2_mut(self.queries);
            gq += &d_queries;
        }
        self.key.backward_params(cache.tokens.view(), d_keys.view(), grads);
        self.value.backward_params(cache.tokens.view(), d_values.view(), grads);
    }
}

/// Unweighted mean over layers, `(L, T, d)` -> `(T, d)`.
pub fn pool_mean(features: ArrayView3<'_, f64>) -> Array2<f64> {
    features.mean_axis(Axis(0)).expect("at least one layer")
}

/// 0-based layer ranges of the two fractional-depth groups. With 1-based
/// layer index `l` and relative depth `l/L`, group A holds depths in
/// `(0.5, 0.75]` and group B depths in `(0.75, 1.0]`.
pub fn depth_groups(layers: usize) -> Result<(Range<usize>, Range<usize>)> {
    // 1-based l is in A iff 2l > L and 4l <= 3L; in B iff 4l > 3L.
    let a_lo = layers / 2 + 1;
    let a_hi = 3 * layers / 4;
    let b_lo = a_hi + 1;
    if a_lo > a_hi || b_lo > layers {
        return Err(Error::invalid(format!(
            "{layers} layers leave a fractional-depth group empty"
        )));
    }
    Ok((a_lo - 1..a_hi, b_lo - 1..layers))
}

/// Means of the two fractional-depth groups, concatenated: `(T, 2d)`.
pub fn pool_depth_groups(features: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    let (a, b) = depth_groups(features.dim().0)?;
    let ma = pool_mean(features.slice(s![a, .., ..]));
    let mb = pool_mean(features.slice(s![b, .., ..]));
    Ok(ndarray::concatenate(Axis(1), &[ma.view(), mb.view()]).expect("same frames"))
}

/// Per-modality layer reduction selected by [`PoolerKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPooler {
    CrossAttention(CrossAttentionPooler),
    Mean { hidden: usize },
    DepthGroups { hidden: usize },
}

impl LayerPooler {
    pub fn new<R: Rng>(
        kind: PoolerKind,
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        hidden: usize,
        cfg: &PoolerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            PoolerKind::Xattn => LayerPooler::CrossAttention(CrossAttentionPooler::new(store, name, hidden, cfg, rng)?),
            PoolerKind::Mean => LayerPooler::Mean { hidden },
            PoolerKind::DepthGroups => {
                depth_groups(layers)?;
                LayerPooler::DepthGroups { hidden }
            }
        })
    }

    pub fn output_width(&self) -> usize {
        match self {
            LayerPooler::CrossAttention(p) => p.output_width(),
            LayerPooler::Mean { hidden } => *hidden,
            LayerPooler::DepthGroups { hidden } => 2 * hidden,
        }
    }

    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        features: ArrayView3<'_, f64>,
        capture: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, Option<Array4<f64>>, Option<PoolerCache>)> {
        match self {
            LayerPooler::CrossAttention(p) => {
                let (y, attn, cache) = p.forward(store, features, capture, dropout_rng)?;
                Ok((y, attn, Some(cache)))
            }
            LayerPooler::Mean { .. } => Ok((pool_mean(features), None, None)),
            LayerPooler::DepthGroups { .. } => Ok((pool_depth_groups(features)?, None, None)),
        }
    }

    pub fn backward(&self, store: &ParamStore, cache: Option<&PoolerCache>, d_pooled: &Array2<f64>, grads: &mut ParamStore) {
        if let (LayerPooler::CrossAttention(p), Some(c)) = (self, cache) {
            p.backward(store, c, d_pooled, grads);
        }
    }
}
