use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{read_features, read_matrix, write_features, write_matrix, StimulusWindow};
use crate::modality::{Modality, PerModality};
use crate::{Error, Result};

/// Relative paths of the three feature files of one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub text: String,
    pub audio: String,
    pub vision: String,
}

impl FeaturePaths {
    pub fn get(&self, m: Modality) -> &str {
        match m {
            Modality::Vision => &self.vision,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub subject: usize,
    pub features: FeaturePaths,
    pub target: String,
}

/// Sidecar JSON document listing the files of a dataset. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub windows: Vec<ManifestEntry>,
    pub frame_rate_hz: f64,
    pub k_out: usize,
    pub parcels: usize,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Windows held in memory with their shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<StimulusWindow>,
    pub n_subjects: usize,
    pub parcels: usize,
    pub k_out: usize,
    pub frame_rate_hz: f64,
}

/// Indices into [`Dataset::windows`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn new(windows: Vec<StimulusWindow>) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("dataset has no windows"))?;
        let (k_out, parcels) = first.target.dim();
        let frame_rate_hz = first.features.vision.frame_rate_hz();
        let shapes = first.features.map(|_, f| (f.layers(), f.hidden()));
        for w in &windows {
            if w.target.dim() != (k_out, parcels) {
                return Err(Error::shape(format!(
                    "window {} target is {:?}, expected ({k_out}, {parcels})",
                    w.id,
                    w.target.dim()
                )));
            }
            for (m, f) in w.features.iter() {
                if (f.layers(), f.hidden()) != shapes[m] {
                    return Err(Error::shape(format!(
                        "window {} {m} features are {}x{}, expected {:?}",
                        w.id,
                        f.layers(),
                        f.hidden(),
                        shapes[m]
                    )));
                }
            }
        }
        let n_subjects = windows.iter().map(|w| w.subject).max().unwrap_or(0) + 1;
        Ok(Self {
            windows,
            n_subjects,
            parcels,
            k_out,
            frame_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// `(layers, hidden)` per modality.
    pub fn input_shapes(&self) -> PerModality<(usize, usize)> {
        self.windows[0].features.map(|_, f| (f.layers(), f.hidden()))
    }

    pub fn max_frames(&self) -> usize {
        self.windows.iter().map(|w| w.frames()).max().unwrap_or(0)
    }

    /// Holds out the last `ceil(fraction * n_s)` windows of every subject,
    /// keeping at least one training window per subject.
    pub fn split(&self, val_fraction: f64) -> Result<Split> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "val_fraction {val_fraction} must lie in [0, 1)"
            )));
        }
        let mut by_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, w) in self.windows.iter().enumerate() {
            by_subject.entry(w.subject).or_default().push(i);
        }
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
        };
        for idx in by_subject.values() {
            let n = idx.len();
            let n_val = ((val_fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
            split.train.extend_from_slice(&idx[..n - n_val]);
            split.val.extend_from_slice(&idx[n - n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        Ok(split)
    }

    /// Writes every window as feature and target files next to a manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.windows.len());
        for w in &self.windows {
            let name = |m: Modality| format!("{}_{}.mirf", w.id, m.name());
            for (m, f) in w.features.iter() {
                write_features(f, dir.join(name(m)))?;
            }
            let target = format!("{}_target.mirp", w.id);
            write_matrix(&w.target, dir.join(&target))?;
            entries.push(ManifestEntry {
                id: w.id.clone(),
                subject: w.subject,
                features: FeaturePaths {
                    text: name(Modality::Text),
                    audio: name(Modality::Audio),
                    vision: name(Modality::Vision),
                },
                target,
            });
        }
        let manifest = Manifest {
            windows: entries,
            frame_rate_hz: self.frame_rate_hz,
            k_out: self.k_out,
            parcels: self.parcels,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut windows = Vec::with_capacity(manifest.windows.len());
        for e in &manifest.windows {
            let features = PerModality::try_from_fn(|m| {
                let f = read_features(dir.join(e.features.get(m)))?;
                if f.modality() != m {
                    return Err(Error::invalid(format!(
                        "{}: file listed as {m} holds {} features",
                        e.id,
                        f.modality()
                    )));
                }
                Ok(f)
            })?;
            let target = read_matrix(dir.join(&e.target))?;
            windows.push(StimulusWindow::new(e.id.clone(), e.subject, features, target)?);
        }
        let ds = Dataset::new(windows)?;
        if ds.k_out != manifest.k_out || ds.parcels != manifest.parcels {
            return Err(Error::shape(format!(
                "manifest declares k_out={} parcels={}, files hold {}x{}",
                manifest.k_out, manifest.parcels, ds.k_out, ds.parcels
            )));
        }
        Ok(ds)
    }
}

/// Per-(subject, parcel) z-scoring statistics estimated on training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNorm {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl TargetNorm {
    pub fn fit(data: &Dataset, train: &[usize]) -> Self {
        let (s, p) = (data.n_subjects, data.parcels);
        let mut sum = Array2::<f64>::zeros((s, p));
        let mut sq = Array2::<f64>::zeros((s, p));
        let mut count = vec![0usize; s];
        for &i in train {
            let w = &data.windows[i];
            let t = &w.target;
            let mut row = sum.row_mut(w.subject);
            row += &t.sum_axis(Axis(0));
            let mut row = sq.row_mut(w.subject);
            row += &t.mapv(|x| x * x).sum_axis(Axis(0));
            count[w.subject] += t.nrows();
        }
        let mut mean = Array2::zeros((s, p));
        let mut std = Array2::ones((s, p));
        for subj in 0..s {
            let n = count[subj] as f64;
            if n < 2.0 {
                continue;
            }
            for j in 0..p {
                let m = sum[[subj, j]] / n;
                let var = (sq[[subj, j]] / n - m * m).max(0.0);
                mean[[subj, j]] = m;
                std[[subj, j]] = if var > 1e-24 { var.sqrt() } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        for w in &mut data.windows {
            let m = self.mean.row(w.subject);
            let sd = self.std.row(w.subject);
            for mut row in w.target.rows_mut() {
                row -= &m;
                row /= &sd;
            }
        }
    }
}
