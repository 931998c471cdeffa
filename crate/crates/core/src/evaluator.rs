//! Per-parcel Pearson scoring and the analyses built on it: network
//! aggregation, modality ablation and dominance, modality-subset training,
//! and linear probes of intermediate representations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::brain_encoder::{BrainEncoder, ModelConfig};
use crate::feature_store::{Dataset, Split};
use crate::modality::{Modality, ModalitySet};
use crate::ridge_baseline::{fit_and_score, RidgeDesign};
use crate::trainer::{train, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Number of networks in the synthetic parcel partition.
pub const N_NETWORKS: usize = 7;

/// Sample Pearson correlation per column; 0 where either column is constant.
pub fn pearson_per_parcel(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.nrows();
    if n < 2 {
        return Err(Error::invalid("pearson needs at least two rows"));
    }
    let mut out = Array1::zeros(pred.ncols());
    for j in 0..pred.ncols() {
        let (a, b) = (pred.column(j), truth.column(j));
        let ma = a.sum() / n as f64;
        let mb = b.sum() / n as f64;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (x, y) = (a[i] - ma, b[i] - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        out[j] = if saa > 0.0 && sbb > 0.0 {
            (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Validation scores, `(subjects, parcels)`, with an optional parcel to
/// network assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub pearson: Array2<f64>,
    pub networks: Option<Vec<usize>>,
}

impl ScoreTable {
    pub fn new(pearson: Array2<f64>) -> Self {
        Self { pearson, networks: None }
    }

    pub fn with_networks(mut self, networks: Vec<usize>) -> Result<Self> {
        if networks.len() != self.pearson.ncols() {
            return Err(Error::shape("network map length differs from parcel count"));
        }
        self.networks = Some(networks);
        Ok(self)
    }

    /// Mean over subjects and parcels.
    pub fn mean(&self) -> f64 {
        self.pearson.mean().unwrap_or(0.0)
    }

    /// Mean over subjects, one value per parcel.
    pub fn per_parcel(&self) -> Array1<f64> {
        self.pearson.mean_axis(Axis(0)).expect("at least one subject")
    }

    /// Mean parcel score inside each network (empty networks score 0).
    pub fn network_means(&self) -> Option<Vec<f64>> {
        let nets = self.networks.as_ref()?;
        let per = self.per_parcel();
        let k = nets.iter().max().map_or(0, |m| m + 1);
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (p, &g) in nets.iter().enumerate() {
            sum[g] += per[p];
            count[g] += 1;
        }
        Some(sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect())
    }

    /// CSV with one row per parcel (`parcel,network,subject0,..`) and a
    /// closing `mean` row.
    pub fn to_csv(&self) -> String {
        let (s, p) = self.pearson.dim();
        let mut out = String::from("parcel,network");
        for i in 0..s {
            let _ = write!(out, ",subject{i}");
        }
        out.push('\n');
        for j in 0..p {
            let net = self.networks.as_ref().map_or(String::new(), |n| n[j].to_string());
            let _ = write!(out, "{j},{net}");
            for i in 0..s {
                let _ = write!(out, ",{:.17e}", self.pearson[[i, j]]);
            }
            out.push('\n');
        }
        out.push_str("mean,");
        for i in 0..s {
            let _ = write!(out, ",{:.17e}", self.pearson.row(i).mean().unwrap_or(0.0));
        }
        out.push('\n');
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty score table"))?;
        let subjects = header.split(',').count().saturating_sub(2);
        let mut rows = Vec::new();
        let mut nets = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.first() == Some(&"mean") {
                break;
            }
            if fields.len() != subjects + 2 {
                return Err(Error::invalid(format!("malformed score row {line:?}")));
            }
            if !fields[1].is_empty() {
                nets.push(fields[1].parse().map_err(|_| Error::invalid("bad network id"))?);
            }
            let vals = fields[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad score {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(vals);
        }
        let p = rows.len();
        let pearson = Array2::from_shape_fn((subjects, p), |(i, j)| rows[j][i]);
        let table = Self::new(pearson);
        if nets.is_empty() {
            Ok(table)
        } else {
            table.with_networks(nets)
        }
    }
}

/// Contiguous 7-way partition of `parcels`, used when no atlas is given.
pub fn synthetic_networks(parcels: usize) -> Vec<usize> {
    (0..parcels).map(|p| p * N_NETWORKS / parcels.max(1)).collect()
}

/// Reads a `parcel,network` CSV (header optional) into a network vector.
pub fn read_network_map(path: impl AsRef<Path>, parcels: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut map = vec![None; parcels];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(Error::invalid(format!("malformed network row {line:?}")));
        };
        let (Ok(p), Ok(n)) = (a.parse::<usize>(), b.parse::<usize>()) else {
            continue; // header
        };
        if p >= parcels {
            return Err(Error::invalid(format!("parcel {p} out of range")));
        }
        map[p] = Some(n);
    }
    map.into_iter()
        .enumerate()
        .map(|(p, n)| n.ok_or_else(|| Error::invalid(format!("parcel {p} has no network"))))
        .collect()
}

/// Scores per-window predictions against the dataset's targets, pooling
/// every window of a subject into one time series per parcel.
pub fn score_predictions(data: &Dataset, windows: &[usize], preds: &[Array2<f64>]) -> Result<ScoreTable> {
    let mut pearson = Array2::zeros((data.n_subjects, data.parcels));
    for s in 0..data.n_subjects {
        let mine: Vec<usize> = (0..windows.len()).filter(|&k| data.windows[windows[k]].subject == s).collect();
        if mine.is_empty() {
            continue;
        }
        let p: Vec<_> = mine.iter().map(|&k| preds[k].view()).collect();
        let t: Vec<_> = mine.iter().map(|&k| data.windows[windows[k]].target.view()).collect();
        let p = concatenate(Axis(0), &p).map_err(|_| Error::shape("prediction shapes differ"))?;
        let t = concatenate(Axis(0), &t).expect("targets share shape");
        pearson.row_mut(s).assign(&pearson_per_parcel(p.view(), t.view())?);
    }
    Ok(ScoreTable::new(pearson))
}

pub fn predict_windows(model: &BrainEncoder, data: &Dataset, windows: &[usize], active: ModalitySet) -> Result<Vec<Array2<f64>>> {
    windows
        .iter()
        .map(|&i| {
            let w = &data.windows[i];
            model.predict(&w.features, w.subject, active)
        })
        .collect()
}

/// Evaluation-mode scores of `model` on `windows` with `active` modalities.
pub fn score_model(model: &BrainEncoder, data: &Dataset, windows: &[usize], active: ModalitySet) -> Result<ScoreTable> {
    score_predictions(data, windows, &predict_windows(model, data, windows, active)?)
}

/// Scores with modality `m` replaced by its null embedding, plus the
/// per-(subject, parcel) drop relative to the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub modality: Modality,
    pub scores: ScoreTable,
    pub drop: Array2<f64>,
}

pub fn ablate_modality(model: &BrainEncoder, data: &Dataset, windows: &[usize], m: Modality) -> Result<Ablation> {
    let all = model.config.modalities;
    let full = score_model(model, data, windows, all)?;
    ablate_against(model, data, windows, m, &full)
}

/// [`ablate_modality`] reusing precomputed full-model scores.
pub fn ablate_against(model: &BrainEncoder, data: &Dataset, windows: &[usize], m: Modality, full: &ScoreTable) -> Result<Ablation> {
    let active = model.config.modalities.without(m);
    let scores = if active.is_empty() {
        let preds = windows
            .iter()
            .map(|&i| {
                let w = &data.windows[i];
                model.predict_all_null(w.frames(), w.subject)
            })
            .collect::<Result<Vec<_>>>()?;
        score_predictions(data, windows, &preds)?
    } else {
        score_model(model, data, windows, active)?
    };
    let drop = &full.pearson - &scores.pearson;
    Ok(Ablation { modality: m, scores, drop })
}

/// Per-parcel dominant modality and its share of the positive drop mass.
/// `drops` is `(3, P)` in fusion order; ties resolve to the earlier modality.
pub fn dominant_modality(drops: ArrayView2<'_, f64>) -> (Vec<Modality>, Array1<f64>) {
    let p = drops.ncols();
    let mut dom = Vec::with_capacity(p);
    let mut strength = Array1::zeros(p);
    for j in 0..p {
        let col = drops.column(j);
        let mut best = 0;
        for k in 1..col.len() {
            if col[k] > col[best] {
                best = k;
            }
        }
        let pos: f64 = col.iter().filter(|&&v| v > 0.0).sum();
        if pos > 0.0 {
            dom.push(Modality::ALL[best]);
            strength[j] = col[best].max(0.0) / pos;
        } else {
            dom.push(Modality::ALL[0]);
        }
    }
    (dom, strength)
}

/// Trains a fresh model that only ever sees `subset` and scores it on the
/// validation windows.
pub fn subset_run(data: &Dataset, split: &Split, subset: ModalitySet, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(ScoreTable, TrainOutcome)> {
    if subset.is_empty() {
        return Err(Error::config("modality subset must not be empty"));
    }
    let mut mc = model_cfg.clone();
    mc.modalities = subset;
    let model = BrainEncoder::new(mc, cfg.seed)?;
    let outcome = train(model, data, split, cfg)?;
    let scores = score_model(&outcome.checkpoint.model, data, &split.val, subset)?;
    Ok((scores, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    PostPooler,
    PostTrunk,
    Output,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Input, Stage::PostPooler, Stage::PostTrunk, Stage::Output];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::PostPooler => "post_pooler",
            Stage::PostTrunk => "post_trunk",
            Stage::Output => "output",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}")))
    }
}

/// Fits the per-subject ridge baseline with `design` on each stage's
/// representation (train windows) and scores it on the validation windows.
/// The output stage is scored directly without fitting.
pub fn stage_probes(
    model: &BrainEncoder,
    data: &Dataset,
    split: &Split,
    stages: &[Stage],
    design: &RidgeDesign,
) -> Result<Vec<(Stage, ScoreTable)>> {
    let reps = (0..data.len())
        .map(|i| {
            let w = &data.windows[i];
            model.stages(&w.features, w.subject)
        })
        .collect::<Result<Vec<_>>>()?;
    stages
        .iter()
        .map(|&st| {
            let table = match st {
                Stage::Output => {
                    let preds: Vec<_> = split.val.iter().map(|&i| reps[i].output.clone()).collect();
                    score_predictions(data, &split.val, &preds)?
                }
                _ => {
                    let r: Vec<_> = reps
                        .iter()
                        .map(|s| match st {
                            Stage::Input => s.input.clone(),
                            Stage::PostPooler => s.post_pooler.clone(),
                            _ => s.post_trunk.clone(),
                        })
                        .collect();
                    fit_and_score(data, &split.train, &split.val, &r, design)?.scores
                }
            };
            Ok((st, table))
        })
        .collect()
}

pub fn stage_probe(model: &BrainEncoder, data: &Dataset, split: &Split, stage: Stage, design: &RidgeDesign) -> Result<ScoreTable> {
    Ok(stage_probes(model, data, split, &[stage], design)?.remove(0).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn pearson_basic_cases() {
        let t = array![[1.0, 2.0], [2.0, -1.0], [4.0, 0.5], [3.0, 0.0]];
        let r = pearson_per_parcel(t.view(), t.view()).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let r = pearson_per_parcel((-&t).view(), t.view()).unwrap();
        assert!(r.iter().all(|&v| (v + 1.0).abs() < 1e-12));
        let r = pearson_per_parcel((&t * 3.0 + 7.0).view(), t.view()).unwrap();
        assert!(r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let c = Array2::from_elem((4, 2), 2.0);
        assert_eq!(pearson_per_parcel(c.view(), t.view()).unwrap().to_vec(), vec![0.0, 0.0]);
        assert!(pearson_per_parcel(t.slice(ndarray::s![..1, ..]), t.slice(ndarray::s![..1, ..])).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            data in proptest::collection::vec(-10.0f64..10.0, 24),
            a in 0.1f64..5.0, b in -3.0f64..3.0, c in 0.1f64..5.0, d in -3.0f64..3.0,
        ) {
            let x = Array2::from_shape_vec((6, 2), data[..12].to_vec()).unwrap();
            let y = Array2::from_shape_vec((6, 2), data[12..].to_vec()).unwrap();
            let r0 = pearson_per_parcel(x.view(), y.view()).unwrap();
            let r1 = pearson_per_parcel((&x * a + b).view(), (&y * c + d).view()).unwrap();
            for (u, v) in r0.iter().zip(r1.iter()) {
                prop_assert!((u - v).abs() < 1e-9);
                prop_assert!(u.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn network_means_match_indicator_weights() {
        let pearson = array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], [0.3, 0.2, 0.1, 0.0, 0.5, 0.5, 0.5, 0.5]];
        let nets = synthetic_networks(8);
        assert_eq!(nets.iter().max(), Some(&6));
        let table = ScoreTable::new(pearson.clone()).with_networks(nets.clone()).unwrap();
        let means = table.network_means().unwrap();
        let per = table.per_parcel();
        for g in 0..N_NETWORKS {
            let w: Vec<f64> = nets.iter().map(|&n| if n == g { 1.0 } else { 0.0 }).collect();
            let total: f64 = w.iter().sum();
            let expect = w.iter().zip(per.iter()).map(|(a, b)| a * b).sum::<f64>() / total;
            assert_eq!(means[g], expect);
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = ScoreTable::new(array![[0.25, -0.5, 1.0 / 3.0]]).with_networks(vec![0, 1, 1]).unwrap();
        let back = ScoreTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_csv().lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn dominance_examples() {
        let (d, s) = dominant_modality(array![[0.3], [0.1], [0.1]].view());
        assert_eq!(d[0], Modality::Vision);
        assert!((s[0] - 0.6).abs() < 1e-12);
        let (d, s) = dominant_modality(array![[0.2], [0.2], [0.2]].view());
        assert_eq!(d[0], Modality::Vision);
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        let (d, s) = dominant_modality(array![[-0.1, 0.0], [-0.2, 0.0], [0.0, -1.0]].view());
        assert_eq!(d, vec![Modality::Vision, Modality::Vision]);
        assert_eq!(s.to_vec(), vec![0.0, 0.0]);
        let (d, s) = dominant_modality(array![[0.1], [-0.3], [0.3]].view());
        assert_eq!(d[0], Modality::Text);
        assert!((s[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("latent".parse::<Stage>().is_err());
    }
}
