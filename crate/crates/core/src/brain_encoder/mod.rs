//! Fusion of pooled modality streams, the temporal trunk, and per-subject
//! readout heads.

mod checkpoint;
mod trunk;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trunk::{Block, Trunk};

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::feature_store::{pool_to_tr, pool_to_tr_backward, LayerResolvedFeatures};
use crate::layer_gating::{pool_mean, LayerPooler, PoolerCache, PoolerConfig, PoolerKind};
use crate::modality::{Modality, ModalitySet, PerModality};
use crate::nn::{Linear, Precision};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    pub modality_dropout_p: f64,
    pub inner_dropout: f64,
    pub n_subjects: usize,
    pub parcels: usize,
    pub k_out: usize,
    /// Length of the learned absolute position table.
    pub max_frames: usize,
    /// Trainable null embedding for absent modalities instead of zeros.
    pub learned_null: bool,
    pub absolute_positions: bool,
    pub rotary: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 2,
            heads: 4,
            ff_multiplier: 4,
            modality_dropout_p: 0.3,
            inner_dropout: 0.0,
            n_subjects: 1,
            parcels: 50,
            k_out: 20,
            max_frames: 100,
            learned_null: false,
            absolute_positions: true,
            rotary: true,
        }
    }
}

impl EncoderConfig {
    pub fn trunk_width(&self) -> usize {
        3 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.trunk_width();
        if self.hidden == 0 || self.heads == 0 || w % self.heads != 0 {
            return Err(Error::config(format!(
                "trunk width {w} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.rotary && (w / self.heads) % 2 != 0 {
            return Err(Error::config("rotary embedding needs an even head dimension"));
        }
        for (name, p) in [("modality_dropout_p", self.modality_dropout_p), ("inner_dropout", self.inner_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.n_subjects == 0 || self.parcels == 0 || self.k_out == 0 || self.ff_multiplier == 0 {
            return Err(Error::config("n_subjects, parcels, k_out and ff_multiplier must be positive"));
        }
        if self.max_frames < self.k_out {
            return Err(Error::config("max_frames must be at least k_out"));
        }
        Ok(())
    }
}

/// `(layers, hidden)` of one modality's cached features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub layers: usize,
    pub hidden: usize,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pooler: PoolerKind,
    pub pooler_config: PoolerConfig,
    pub encoder: EncoderConfig,
    pub inputs: PerModality<InputShape>,
    /// Modalities the model is ever allowed to see.
    pub modalities: ModalitySet,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::config("modality subset is empty"));
        }
        for (_, s) in self.inputs.iter() {
            if s.layers == 0 || s.hidden == 0 {
                return Err(Error::config("input layers and hidden width must be positive"));
            }
            if self.pooler == PoolerKind::Xattn {
                self.pooler_config.validate(s.hidden)?;
            }
        }
        Ok(())
    }
}

/// Intermediate representations of one window, each pooled to the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    /// Layer-averaged input features, concatenated over modalities.
    pub input: Array2<f64>,
    /// Concatenated pooler outputs before modality projection.
    pub post_pooler: Array2<f64>,
    pub post_trunk: Array2<f64>,
    pub output: Array2<f64>,
}

pub struct ForwardOutput {
    /// `(K, P)`.
    pub prediction: Array2<f64>,
    /// Captured pooler weights `(T, heads, n_q, L)` per active modality.
    pub attention: PerModality<Option<Array4<f64>>>,
    pub(crate) cache: ForwardCache,
}

pub(crate) struct ForwardCache {
    active: ModalitySet,
    subject: usize,
    pooled: PerModality<Option<Array2<f64>>>,
    poolers: PerModality<Option<PoolerCache>>,
    trunk: trunk::TrunkCache,
    trunk_out: Array2<f64>,
    frames: usize,
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Pass {
    pub active: ModalitySet,
    pub capture: bool,
}

impl Default for Pass {
    fn default() -> Self {
        Self {
            active: ModalitySet::all(),
            capture: false,
        }
    }
}

/// The full model: layer poolers, modality projectors, trunk and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub poolers: PerModality<LayerPooler>,
    pub projectors: PerModality<Linear>,
    pub nulls: PerModality<Option<ParamId>>,
    pub trunk: Trunk,
    pub heads: Vec<Linear>,
}

impl BrainEncoder {
    /// Builds and initializes a model; the layout depends only on `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let d = enc.hidden;
        let mut poolers = Vec::new();
        let mut projectors = Vec::new();
        let mut nulls = Vec::new();
        for m in Modality::ALL {
            let shape = config.inputs[m];
            let pooler = LayerPooler::new(
                config.pooler,
                &mut store,
                &format!("pooler.{m}"),
                shape.layers,
                shape.hidden,
                &config.pooler_config,
                &mut rng,
            )?;
            projectors.push(Linear::new(&mut store, &format!("projector.{m}"), pooler.output_width(), d, true, &mut rng));
            poolers.push(pooler);
            nulls.push(enc.learned_null.then(|| store.zeros(format!("null.{m}"), &[d])));
        }
        let trunk = Trunk::new(
            &mut store,
            enc.trunk_width(),
            enc.depth,
            enc.heads,
            enc.ff_multiplier,
            enc.max_frames,
            enc.inner_dropout,
            enc.absolute_positions,
            enc.rotary,
            &mut rng,
        );
        let heads = (0..enc.n_subjects)
            .map(|s| Linear::new(&mut store, &format!("head.subject{s}"), enc.trunk_width(), enc.parcels, true, &mut rng))
            .collect();
        Ok(Self {
            poolers: into_per_modality(poolers),
            projectors: into_per_modality(projectors),
            nulls: into_per_modality(nulls),
            config,
            params: store,
            trunk,
            heads,
        })
    }

    /// Rebuilds the layout from `config` and installs `params`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&params)?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, features: &PerModality<LayerResolvedFeatures>, subject: usize, active: ModalitySet) -> Result<usize> {
        if active.is_empty() {
            return Err(Error::invalid("active modality set is empty"));
        }
        if subject >= self.heads.len() {
            return Err(Error::invalid(format!(
                "unknown subject {subject} (model has {})",
                self.heads.len()
            )));
        }
        let frames = features.vision.frames();
        for (m, f) in features.iter() {
            let s = self.config.inputs[m];
            if f.layers() != s.layers || f.hidden() != s.hidden || f.frames() != frames {
                return Err(Error::shape(format!(
                    "{m} features are {}x{}x{}, model expects {}x{frames}x{}",
                    f.layers(),
                    f.frames(),
                    f.hidden(),
                    s.layers,
                    s.hidden
                )));
            }
        }
        if frames < self.config.encoder.k_out {
            return Err(Error::shape(format!(
                "{frames} frames cannot be pooled to {} outputs",
                self.config.encoder.k_out
            )));
        }
        Ok(frames)
    }

    /// Projects each active stream to width `D`, substitutes null embeddings
    /// for inactive ones and concatenates in vision, audio, text order.
    pub fn fuse(&self, streams: &PerModality<Option<Array2<f64>>>, active: ModalitySet) -> Result<Array2<f64>> {
        if active.is_empty() {
            return Err(Error::invalid("active modality set is empty"));
        }
        let frames = streams
            .iter()
            .find_map(|(m, s)| if active.contains(m) { s.as_ref().map(|a| a.nrows()) } else { None })
            .ok_or_else(|| Error::invalid("no stream supplied for an active modality"))?;
        let mut blocks = Vec::with_capacity(3);
        for m in Modality::ALL {
            let block = if active.contains(m) {
                let x = streams[m]
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("active modality {m} has no stream")))?;
                if x.nrows() != frames {
                    return Err(Error::shape("modality streams disagree on frame count"));
                }
                let mut y = self.projectors[m].forward(&self.params, x.view());
                self.config.precision.apply(&mut y);
                y
            } else {
                self.null_block(m, frames)
            };
            blocks.push(block);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok(concatenate(Axis(1), &views).expect("equal rows"))
    }

    fn null_block(&self, m: Modality, frames: usize) -> Array2<f64> {
        let d = self.config.encoder.hidden;
        match self.nulls[m] {
            Some(id) => self.params.view1(id).broadcast((frames, d)).expect("row broadcast").to_owned(),
            None => Array2::zeros((frames, d)),
        }
    }

    /// Prediction with every stream replaced by its null embedding.
    pub fn predict_all_null(&self, frames: usize, subject: usize) -> Result<Array2<f64>> {
        let blocks: Vec<_> = Modality::ALL.iter().map(|&m| self.null_block(m, frames)).collect();
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let u = concatenate(Axis(1), &views).expect("equal rows");
        let r = self.trunk_forward(u.view())?;
        self.readout(r.view(), subject)
    }

    /// Applies the subject head per frame and pools the result to `K` rows.
    pub fn readout(&self, r: ArrayView2<'_, f64>, subject: usize) -> Result<Array2<f64>> {
        let head = self
            .heads
            .get(subject)
            .ok_or_else(|| Error::invalid(format!("unknown subject {subject}")))?;
        let mut y = head.forward(&self.params, r);
        self.config.precision.apply(&mut y);
        pool_to_tr(y.view(), self.config.encoder.k_out)
    }

    /// Trunk forward pass without dropout.
    pub fn trunk_forward(&self, u: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.trunk.forward::<ChaCha8Rng>(&self.params, u, self.config.precision, None)?.0)
    }

    /// Full forward pass. Supplying `rng` switches on training behaviour
    /// (attention and inner dropout); modality dropout is decided by the
    /// caller through `pass.active`.
    pub fn forward<R: Rng>(
        &self,
        features: &PerModality<LayerResolvedFeatures>,
        subject: usize,
        pass: Pass,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let active = ModalitySet::from_iter(pass.active.iter().filter(|&m| self.config.modalities.contains(m)));
        let frames = self.check_inputs(features, subject, active)?;
        let mut pooled = PerModality::from_fn(|_| None);
        let mut caches = PerModality::from_fn(|_| None);
        let mut attention = PerModality::from_fn(|_| None);
        for m in active.iter() {
            let (y, attn, cache) = self.poolers[m].forward(&self.params, features[m].data(), pass.capture, rng.as_deref_mut())?;
            pooled[m] = Some(y);
            caches[m] = cache;
            attention[m] = attn;
        }
        let u = self.fuse(&pooled, active)?;
        let (r, tcache) = self.trunk.forward(&self.params, u.view(), self.config.precision, rng)?;
        let prediction = self.readout(r.view(), subject)?;
        Ok(ForwardOutput {
            prediction,
            attention,
            cache: ForwardCache {
                active,
                subject,
                pooled,
                poolers: caches,
                trunk: tcache,
                trunk_out: r,
                frames,
            },
        })
    }

    /// Evaluation-mode prediction `(K, P)`.
    pub fn predict(&self, features: &PerModality<LayerResolvedFeatures>, subject: usize, active: ModalitySet) -> Result<Array2<f64>> {
        Ok(self
            .forward::<ChaCha8Rng>(features, subject, Pass { active, capture: false }, None)?
            .prediction)
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/d(prediction)`.
    pub fn backward(&self, out: &ForwardOutput, d_pred: ArrayView2<'_, f64>, grads: &mut ParamStore) {
        let c = &out.cache;
        let p = &self.params;
        let d_y = pool_to_tr_backward(d_pred, c.frames);
        let d_r = self.heads[c.subject].backward(p, c.trunk_out.view(), d_y.view(), grads);
        let d_u = self.trunk.backward(p, &c.trunk, d_r, grads);
        let d = self.config.encoder.hidden;
        for m in Modality::ALL {
            let block = d_u.slice(s![.., m.index() * d..(m.index() + 1) * d]);
            if c.active.contains(m) {
                let x = c.pooled[m].as_ref().expect("active stream cached");
                let d_x = self.projectors[m].backward(p, x.view(), block, grads);
                self.poolers[m].backward(p, c.poolers[m].as_ref(), &d_x, grads);
            } else if let Some(id) = self.nulls[m] {
                let mut g = grads.view1_mut(id);
                g += &block.sum_axis(Axis(0));
            }
        }
    }

    /// Per-stage representations pooled to `K` rows, for linear probing.
    pub fn stages(&self, features: &PerModality<LayerResolvedFeatures>, subject: usize) -> Result<Stages> {
        let active = self.config.modalities;
        let k = self.config.encoder.k_out;
        let out = self.forward::<ChaCha8Rng>(features, subject, Pass { active, capture: false }, None)?;
        let means: Vec<_> = Modality::ALL
            .iter()
            .filter(|m| active.contains(**m))
            .map(|&m| pool_mean(features[m].data()))
            .collect();
        let means: Vec<_> = means.iter().map(|a| a.view()).collect();
        let input = concatenate(Axis(1), &means).expect("equal rows");
        let pooled: Vec<_> = Modality::ALL
            .iter()
            .filter_map(|&m| out.cache.pooled[m].as_ref().map(|a| a.view()))
            .collect();
        let post_pooler = concatenate(Axis(1), &pooled).expect("equal rows");
        Ok(Stages {
            input: pool_to_tr(input.view(), k)?,
            post_pooler: pool_to_tr(post_pooler.view(), k)?,
            post_trunk: pool_to_tr(out.cache.trunk_out.view(), k)?,
            output: out.prediction,
        })
    }
}

fn into_per_modality<T>(v: Vec<T>) -> PerModality<T> {
    let mut it = v.into_iter();
    PerModality::from_fn(|_| it.next().expect("one entry per modality"))
}

/// Drops each modality independently with probability `p`, redrawing the
/// whole mask until at least one modality survives.
pub fn sample_modality_mask<R: Rng>(p: f64, rng: &mut R) -> ModalitySet {
    sample_mask_within(ModalitySet::all(), p, rng)
}

/// [`sample_modality_mask`] restricted to the members of `allowed`.
pub fn sample_mask_within<R: Rng>(allowed: ModalitySet, p: f64, rng: &mut R) -> ModalitySet {
    assert!(!allowed.is_empty(), "cannot sample from an empty modality set");
    loop {
        let set: ModalitySet = allowed.iter().filter(|_| rng.gen::<f64>() >= p).collect();
        if !set.is_empty() {
            return set;
        }
    }
}
