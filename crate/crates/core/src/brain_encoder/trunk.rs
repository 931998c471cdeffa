use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::nn::{gelu, gelu_grad, normal, softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCache, Linear, Precision, Rotary, ROTARY_BASE};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// One pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Temporal self-attention stack over the fused sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub positions: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub rotary: Option<Rotary>,
    pub width: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub inner_dropout: f64,
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

pub(crate) struct TrunkCache {
    blocks: Vec<BlockCache>,
    frames: usize,
}

fn dropout_mask<R: Rng>(rng: &mut R, p: f64, dim: (usize, usize)) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(dim, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

impl Trunk {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        width: usize,
        depth: usize,
        heads: usize,
        ff_multiplier: usize,
        max_frames: usize,
        inner_dropout: f64,
        absolute_positions: bool,
        rotary: bool,
        rng: &mut R,
    ) -> Self {
        let positions = absolute_positions
            .then(|| store.add("trunk.positions", &[max_frames, width], normal(rng, 0.02, max_frames * width)));
        let ff = ff_multiplier * width;
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("trunk.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), width),
                    qkv: Linear::new(store, &format!("{p}.attn.qkv"), width, 3 * width, true, rng),
                    attn_out: Linear::new(store, &format!("{p}.attn.out"), width, width, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), width),
                    ff_in: Linear::new(store, &format!("{p}.ff.in"), width, ff, true, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff.out"), ff, width, true, rng),
                }
            })
            .collect();
        let rotary = rotary.then(|| Rotary::new(max_frames, width / heads, ROTARY_BASE));
        Self {
            positions,
            blocks,
            rotary,
            width,
            heads,
            max_frames,
            inner_dropout,
        }
    }

    /// Zeroes the output projections of every residual branch so each block
    /// becomes the identity.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            for lin in [b.attn_out, b.ff_out] {
                store.data_mut(lin.weight).fill(0.0);
                if let Some(bias) = lin.bias {
                    store.data_mut(bias).fill(0.0);
                }
            }
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub(crate) fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        u: ArrayView2<'_, f64>,
        precision: Precision,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, TrunkCache)> {
        let (frames, w) = u.dim();
        if frames > self.max_frames {
            return Err(Error::shape(format!(
                "{frames} frames exceed the position table ({})",
                self.max_frames
            )));
        }
        if w != self.width {
            return Err(Error::shape(format!("trunk expects width {}, got {w}", self.width)));
        }
        let mut x = u.to_owned();
        if let Some(pos) = self.positions {
            x += &store.view2(pos).slice(s![..frames, ..]);
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let drop = self.inner_dropout;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = b.ln1.forward(store, x.view());
            let mut qkv = b.qkv.forward(store, h1.view());
            precision.apply(&mut qkv);
            let mut q = qkv.slice(s![.., ..w]).to_owned();
            let mut k = qkv.slice(s![.., w..2 * w]).to_owned();
            let v = qkv.slice(s![.., 2 * w..]).to_owned();
            let mut mixed = Array2::zeros((frames, w));
            let mut probs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let cols = hd * dh..(hd + 1) * dh;
                if let Some(rot) = &self.rotary {
                    rot.apply(&mut q.slice_mut(s![.., cols.clone()]), false);
                    rot.apply(&mut k.slice_mut(s![.., cols.clone()]), false);
                }
                let mut a = q.slice(s![.., cols.clone()]).dot(&k.slice(s![.., cols.clone()]).t()) * scale;
                softmax_rows(&mut a.view_mut());
                mixed
                    .slice_mut(s![.., cols.clone()])
                    .assign(&a.dot(&v.slice(s![.., cols])));
                probs.push(a);
            }
            let mut attn = b.attn_out.forward(store, mixed.view());
            precision.apply(&mut attn);
            let attn_mask = match (drop > 0.0, rng.as_deref_mut()) {
                (true, Some(r)) => Some(dropout_mask(r, drop, attn.dim())),
                _ => None,
            };
            if let Some(m) = &attn_mask {
                attn *= m;
            }
            x += &attn;

            let (h2, ln2) = b.ln2.forward(store, x.view());
            let mut pre_act = b.ff_in.forward(store, h2.view());
            precision.apply(&mut pre_act);
            let act = pre_act.mapv(gelu);
            let mut ff = b.ff_out.forward(store, act.view());
            precision.apply(&mut ff);
            let ff_mask = match (drop > 0.0, rng.as_deref_mut()) {
                (true, Some(r)) => Some(dropout_mask(r, drop, ff.dim())),
                _ => None,
            };
            if let Some(m) = &ff_mask {
                ff *= m;
            }
            x += &ff;
            caches.push(BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                mixed,
                attn_mask,
                ln2,
                h2,
                pre_act,
                act,
                ff_mask,
            });
        }
        Ok((x, TrunkCache { blocks: caches, frames }))
    }

    /// Returns `dL/du` and accumulates parameter gradients.
    pub(crate) fn backward(&self, store: &ParamStore, cache: &TrunkCache, d_out: Array2<f64>, grads: &mut ParamStore) -> Array2<f64> {
        let w = self.width;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = d_out;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // feed-forward branch
            let mut d_ff = dx.clone();
            if let Some(m) = &c.ff_mask {
                d_ff *= m;
            }
            let mut d_act = b.ff_out.backward(store, c.act.view(), d_ff.view(), grads);
            d_act.zip_mut_with(&c.pre_act, |g, &z| *g *= gelu_grad(z));
            let d_h2 = b.ff_in.backward(store, c.h2.view(), d_act.view(), grads);
            dx += &b.ln2.backward(store, &c.ln2, d_h2.view(), grads);

            // attention branch
            let mut d_attn = dx.clone();
            if let Some(m) = &c.attn_mask {
                d_attn *= m;
            }
            let d_mixed = b.attn_out.backward(store, c.mixed.view(), d_attn.view(), grads);
            let mut d_qkv = Array2::zeros((cache.frames, 3 * w));
            for hd in 0..self.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let p = &c.probs[hd];
                let d_o = d_mixed.slice(s![.., cols.clone()]);
                let vh = c.v.slice(s![.., cols.clone()]);
                let d_p = d_o.dot(&vh.t());
                d_qkv
                    .slice_mut(s![.., 2 * w + cols.start..2 * w + cols.end])
                    .assign(&p.t().dot(&d_o));
                let d_s = softmax_rows_backward(p.view(), d_p.view()) * scale;
                let mut d_q = d_s.dot(&c.k.slice(s![.., cols.clone()]));
                let mut d_k = d_s.t().dot(&c.q.slice(s![.., cols.clone()]));
                if let Some(rot) = &self.rotary {
                    rot.apply(&mut d_q.view_mut(), true);
                    rot.apply(&mut d_k.view_mut(), true);
                }
                d_qkv.slice_mut(s![.., cols.clone()]).assign(&d_q);
                d_qkv.slice_mut(s![.., w + cols.start..w + cols.end]).assign(&d_k);
            }
            let d_h1 = b.qkv.backward(store, c.h1.view(), d_qkv.view(), grads);
            dx += &b.ln1.backward(store, &c.ln1, d_h1.view(), grads);
        }
        if let Some(pos) = self.positions {
            let mut g = grads.view2_mut(pos);
            let mut rows = g.slice_mut(s![..cache.frames, ..]);
            rows += &dx;
        }
        dx
    }
}
