//! Declarative run configuration. A named preset supplies every value; a
//! user TOML document is deep-merged on top, unknown keys are rejected, and
//! the resolved document is echoed next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brain_encoder::{EncoderConfig, InputShape, ModelConfig};
use crate::ensembler::EnsembleConfig;
use crate::feature_store::{Dataset, ModalityPlan, PlantedSpec, DEFAULT_FRAME_RATE_HZ};
use crate::layer_gating::{PoolerConfig, PoolerKind};
use crate::modality::{ModalitySet, PerModality};
use crate::nn::Precision;
use crate::ridge_baseline::RidgeDesign;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_windows: usize,
    pub seed: u64,
    pub map_seed: u64,
    pub plans: PerModality<ModalityPlan>,
    /// Relative contribution of each modality to the response variance.
    pub weights: PerModality<f64>,
    pub parcels: usize,
    pub frames: usize,
    pub k_out: usize,
    pub n_subjects: usize,
    pub noise_std: f64,
    pub layer_offset_scale: f64,
    pub kernel: Vec<f64>,
    pub frame_rate_hz: f64,
}

impl PlantedConfig {
    pub fn spec(&self) -> PlantedSpec {
        let mut spec = PlantedSpec::with_random_map(self.plans.clone(), self.parcels, self.weights.clone(), self.map_seed);
        spec.noise_std = self.noise_std;
        spec.layer_offset_scale = self.layer_offset_scale;
        spec.kernel = self.kernel.clone();
        spec.frames = self.frames;
        spec.k_out = self.k_out;
        spec.n_subjects = self.n_subjects;
        spec.frame_rate_hz = self.frame_rate_hz;
        spec
    }

    pub fn generate(&self) -> Result<Dataset> {
        Dataset::new(crate::feature_store::generate_planted_dataset(&self.spec(), self.n_windows, self.seed)?)
    }
}

/// Where the windows come from: a manifest on disk or the planted generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub planted: PlantedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub pooler: PoolerKind,
    pub modalities: ModalitySet,
    pub pooler_config: PoolerConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Optional `parcel,network` CSV; a synthetic partition is used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub networks: Option<PathBuf>,
    /// Validation batches used for attention attribution.
    pub attribution_batches: usize,
    pub attribution_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub nq_grid: Vec<usize>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ridge: RidgeDesign,
    pub ensemble: EnsembleConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => desk(),
            Preset::Paper => paper(),
        }
    }

    /// Preset merged with an optional TOML file.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        let merged = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                let user: toml::Value = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                merge(base, user)
            }
            None => base,
        };
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(preset: Preset, text: &str) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg: RunConfig = merge(base, user).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ridge.validate()?;
        self.model.encoder.validate()?;
        if self.model.modalities.is_empty() {
            return Err(Error::config("modality subset must not be empty"));
        }
        if self.ensemble.tau <= 0.0 {
            return Err(Error::config("ensemble tau must be positive"));
        }
        if self.sweep.nq_grid.is_empty() || self.sweep.nq_grid.contains(&0) || self.sweep.repeats == 0 {
            return Err(Error::config("sweep grid entries and repeats must be positive"));
        }
        Ok(())
    }

    /// Loads the manifest if one is configured, else generates planted data.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.manifest {
            Some(p) => Dataset::load(p),
            None => self.data.planted.generate(),
        }
    }

    /// Model configuration matching the geometry of `data`.
    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        let mut encoder = self.model.encoder.clone();
        encoder.n_subjects = data.n_subjects;
        encoder.parcels = data.parcels;
        encoder.k_out = data.k_out;
        encoder.max_frames = encoder.max_frames.max(data.max_frames());
        ModelConfig {
            pooler: self.model.pooler,
            pooler_config: self.model.pooler_config,
            encoder,
            inputs: data.input_shapes().map(|_, &(layers, hidden)| InputShape { layers, hidden }),
            modalities: self.model.modalities,
            precision: self.train.precision,
        }
    }
}

/// Recursive table merge; values in `over` win.
fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

fn desk() -> RunConfig {
    let plan = |planted_layer| ModalityPlan {
        layers: 12,
        hidden: 32,
        planted_layer,
    };
    RunConfig {
        out: PathBuf::from("runs/desk"),
        data: DataConfig {
            manifest: None,
            planted: PlantedConfig {
                n_windows: 240,
                seed: 7,
                map_seed: 11,
                plans: PerModality {
                    vision: plan(8),
                    audio: plan(5),
                    text: plan(10),
                },
                weights: PerModality::from_fn(|_| 1.0),
                parcels: 50,
                frames: 100,
                k_out: 20,
                n_subjects: 2,
                noise_std: 0.1,
                layer_offset_scale: 3.0,
                kernel: vec![1.0],
                frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            },
        },
        model: ModelSection {
            pooler: PoolerKind::Xattn,
            modalities: ModalitySet::all(),
            pooler_config: PoolerConfig {
                n_queries: 8,
                heads: 4,
                attention_dropout: 0.2,
            },
            encoder: EncoderConfig {
                hidden: 128,
                depth: 2,
                heads: 4,
                max_frames: 100,
                modality_dropout_p: 0.0,
                ..EncoderConfig::default()
            },
        },
        train: TrainConfig {
            peak_lr: 3e-3,
            epochs: 10,
            batch_size: 2,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            networks: None,
            attribution_batches: 4,
            attribution_batch_size: 8,
        },
        ridge: RidgeDesign::default(),
        ensemble: EnsembleConfig::default(),
        sweep: SweepConfig {
            nq_grid: vec![1, 2, 3, 4, 5, 8, 12, 16, 24, 32],
            repeats: 1,
        },
    }
}

fn paper() -> RunConfig {
    let plan = |planted_layer| ModalityPlan {
        layers: 48,
        hidden: 2048,
        planted_layer,
    };
    let mut cfg = desk();
    cfg.out = PathBuf::from("runs/paper");
    cfg.data.planted.plans = PerModality {
        vision: plan(27),
        audio: plan(30),
        text: plan(37),
    };
    cfg.data.planted.parcels = 1000;
    cfg.data.planted.frames = 300;
    cfg.data.planted.k_out = 100;
    cfg.data.planted.n_subjects = 4;
    cfg.model.pooler_config = PoolerConfig::default();
    cfg.model.encoder = EncoderConfig {
        hidden: 3072,
        depth: 8,
        heads: 8,
        n_subjects: 4,
        parcels: 1000,
        k_out: 100,
        max_frames: 300,
        ..EncoderConfig::default()
    };
    cfg.train = TrainConfig {
        precision: Precision::Mixed,
        ..TrainConfig::default()
    };
    cfg.ensemble.top_n = 15;
    cfg.sweep.repeats = 3;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            let back = RunConfig::from_toml_str(p, &cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
        let desk = RunConfig::preset(Preset::Desk);
        assert_eq!(desk.model.encoder.hidden, 128);
        assert_eq!(desk.model.encoder.depth, 2);
        assert_eq!(desk.data.planted.parcels, 50);
        assert_eq!(desk.data.planted.plans.text.layers, 12);
        assert_eq!(desk.data.planted.frames, 100);
        assert_eq!(desk.data.planted.k_out, 20);
        let paper = RunConfig::preset(Preset::Paper);
        assert_eq!(paper.model.encoder.hidden, 3072);
        assert_eq!(paper.model.pooler_config.n_queries, 24);
        assert_eq!(paper.train.peak_lr, 1e-4);
    }

    #[test]
    fn user_values_override_nested_keys() {
        let cfg = RunConfig::from_toml_str(Preset::Desk, "[train]\nepochs = 3\n[model.encoder]\ndepth = 1\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.encoder.depth, 1);
        assert_eq!(cfg.model.encoder.hidden, 128);
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str(Preset::Desk, "[train]\nepoch = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml_str(Preset::Desk, "colour = 1\n").is_err());
        assert!(RunConfig::from_toml_str(Preset::Desk, "[model]\nmodalities = \"\"\n").is_err());
    }
}
