//! Attention attribution: captured pooler weights are averaged over windows
//! and frames, then reduced into per-modality, per-head, per-query and
//! frame-resolved layer profiles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView4, ArrayView5, Axis};
use rand_chacha::ChaCha8Rng;

use crate::brain_encoder::{BrainEncoder, Pass};
use crate::feature_store::Dataset;
use crate::modality::{ModalitySet, PerModality};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Modality,
    PerHead,
    PerQuery,
    TrResolved,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] = [
        ProfileKind::Modality,
        ProfileKind::PerHead,
        ProfileKind::PerQuery,
        ProfileKind::TrResolved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::Modality => "modality",
            ProfileKind::PerHead => "per_head",
            ProfileKind::PerQuery => "per_query",
            ProfileKind::TrResolved => "tr_resolved",
        }
    }

    fn row_label(self) -> &'static str {
        match self {
            ProfileKind::Modality => "all",
            ProfileKind::PerHead => "head",
            ProfileKind::PerQuery => "query",
            ProfileKind::TrResolved => "frame",
        }
    }
}

/// Running sums of captured weights for one modality. Partial accumulators
/// over disjoint batches combine with [`AttributionAccumulator::merge`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributionAccumulator {
    /// Σ over windows and frames, `(heads, n_q, L)`.
    head_query: Option<Array3<f64>>,
    /// Σ over windows, heads and queries, `(T, L)`.
    time: Option<Array2<f64>>,
    windows: usize,
    frames: usize,
}

impl AttributionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Adds one window of weights `(T, heads, n_q, L)`.
    pub fn accumulate_window(&mut self, pi: ArrayView4<'_, f64>) -> Result<()> {
        let (t, h, q, l) = pi.dim();
        let hq = pi.sum_axis(Axis(0));
        let time = pi.sum_axis(Axis(1)).sum_axis(Axis(1));
        match (&mut self.head_query, &mut self.time) {
            (Some(a), Some(b)) => {
                if a.dim() != (h, q, l) || b.dim() != (t, l) {
                    return Err(Error::shape(format!(
                        "attention batch ({t}, {h}, {q}, {l}) does not match accumulated ({}, {:?})",
                        b.nrows(),
                        a.dim()
                    )));
                }
                *a += &hq;
                *b += &time;
            }
            _ => {
                self.head_query = Some(hq);
                self.time = Some(time);
            }
        }
        self.windows += 1;
        self.frames += t;
        Ok(())
    }

    /// Adds a batch `(B, T, heads, n_q, L)`.
    pub fn accumulate(&mut self, batch: ArrayView5<'_, f64>) -> Result<()> {
        for pi in batch.outer_iter() {
            self.accumulate_window(pi)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AttributionAccumulator) -> Result<()> {
        match (&other.head_query, &other.time) {
            (Some(a), Some(b)) => match (&mut self.head_query, &mut self.time) {
                (Some(sa), Some(sb)) => {
                    if sa.dim() != a.dim() || sb.dim() != b.dim() {
                        return Err(Error::shape("cannot merge accumulators of different shapes"));
                    }
                    *sa += a;
                    *sb += b;
                }
                _ => {
                    self.head_query = Some(a.clone());
                    self.time = Some(b.clone());
                }
            },
            _ => return Ok(()),
        }
        self.windows += other.windows;
        self.frames += other.frames;
        Ok(())
    }

    /// Mean weights over windows and frames, `(heads, n_q, L)`.
    pub fn mean_weights(&self) -> Result<Array3<f64>> {
        let hq = self.head_query.as_ref().ok_or_else(|| Error::invalid("attribution accumulator is empty"))?;
        Ok(hq / self.frames as f64)
    }

    pub fn profile(&self, kind: ProfileKind) -> Result<Array2<f64>> {
        let mean = self.mean_weights()?;
        let (h, q, l) = mean.dim();
        Ok(match kind {
            ProfileKind::Modality => (mean.sum_axis(Axis(0)).sum_axis(Axis(0)) / (h * q) as f64).insert_axis(Axis(0)),
            ProfileKind::PerHead => mean.sum_axis(Axis(1)) / q as f64,
            ProfileKind::PerQuery => mean.sum_axis(Axis(0)) / h as f64,
            ProfileKind::TrResolved => {
                let time = self.time.as_ref().expect("set together with head_query");
                let out = time / (self.windows * h * q) as f64;
                debug_assert_eq!(out.ncols(), l);
                out
            }
        })
    }

    /// The `(L)` profile that marginalizes heads and queries.
    pub fn modality_profile(&self) -> Result<Array1<f64>> {
        Ok(self.profile(ProfileKind::Modality)?.row(0).to_owned())
    }
}

/// Runs the model in evaluation mode with capture on over the first
/// `batches × batch_size` of `windows`, returning one accumulator per active
/// modality with a cross-attention pooler.
pub fn capture_attention(
    model: &BrainEncoder,
    data: &Dataset,
    windows: &[usize],
    batches: usize,
    batch_size: usize,
) -> Result<PerModality<Option<AttributionAccumulator>>> {
    let take = (batches * batch_size).min(windows.len());
    if take == 0 {
        return Err(Error::invalid("attribution needs at least one window"));
    }
    let mut acc: PerModality<Option<AttributionAccumulator>> = PerModality::from_fn(|_| None);
    for &i in &windows[..take] {
        let w = &data.windows[i];
        let pass = Pass {
            active: ModalitySet::all(),
            capture: true,
        };
        let out = model.forward::<ChaCha8Rng>(&w.features, w.subject, pass, None)?;
        for (m, pi) in out.attention.iter() {
            if let Some(pi) = pi {
                acc[m].get_or_insert_with(AttributionAccumulator::new).accumulate_window(pi.view())?;
            }
        }
    }
    Ok(acc)
}

/// CSV with one row per head, query or frame and one column per layer.
pub fn profile_csv(profile: &Array2<f64>, kind: ProfileKind) -> String {
    let mut s = String::from(kind.row_label());
    for l in 0..profile.ncols() {
        write!(s, ",layer{l}").unwrap();
    }
    s.push('\n');
    for (r, row) in profile.outer_iter().enumerate() {
        match kind {
            ProfileKind::Modality => s.push_str("all"),
            _ => write!(s, "{r}").unwrap(),
        }
        for v in row {
            write!(s, ",{v:.17e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_profile_csv(profile: &Array2<f64>, kind: ProfileKind, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, profile_csv(profile, kind))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};
    use rand::{Rng, SeedableRng};

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, h: usize, q: usize, l: usize) -> Array5<f64> {
        let mut x = Array5::from_shape_fn((b, t, h, q, l), |_| rng.gen_range(0.01..1.0));
        for mut row in x.lanes_mut(Axis(4)) {
            let s = row.sum();
            row /= s;
        }
        x
    }

    fn assert_rows_sum_to_one(p: &Array2<f64>) {
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_weights_give_uniform_profiles() {
        let l = 5;
        let batch = Array5::from_elem((2, 4, 3, 2, l), 1.0 / l as f64);
        let mut acc = AttributionAccumulator::new();
        acc.accumulate(batch.view()).unwrap();
        for kind in ProfileKind::ALL {
            let p = acc.profile(kind).unwrap();
            assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15), "{kind:?}");
        }
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        let acc = AttributionAccumulator::new();
        assert!(acc.profile(ProfileKind::Modality).is_err());
    }

    #[test]
    fn shape_drift_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut acc = AttributionAccumulator::new();
        acc.accumulate(random_batch(&mut rng, 1, 4, 2, 2, 3).view()).unwrap();
        assert!(acc.accumulate(random_batch(&mut rng, 1, 4, 2, 2, 4).view()).is_err());
        assert!(acc.accumulate(random_batch(&mut rng, 1, 5, 2, 2, 3).view()).is_err());
    }

    #[test]
    fn streaming_matches_full_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, h, q, l) = (6, 3, 4, 7);
        let batches: Vec<Array5<f64>> = (0..4).map(|i| random_batch(&mut rng, 1 + i, t, h, q, l)).collect();
        let views: Vec<_> = batches.iter().map(|b| b.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).unwrap();
        let mut acc = AttributionAccumulator::new();
        for b in &batches {
            acc.accumulate(b.view()).unwrap();
        }
        let n = all.len_of(Axis(0));

        // Direct means over the stacked array, element by element.
        let mut modality = Array1::<f64>::zeros(l);
        let mut per_head = Array2::<f64>::zeros((h, l));
        let mut per_query = Array2::<f64>::zeros((q, l));
        let mut tr = Array2::<f64>::zeros((t, l));
        for bi in 0..n {
            for ti in 0..t {
                for hi in 0..h {
                    for qi in 0..q {
                        for li in 0..l {
                            let v = all[[bi, ti, hi, qi, li]];
                            modality[li] += v / (n * t * h * q) as f64;
                            per_head[[hi, li]] += v / (n * t * q) as f64;
                            per_query[[qi, li]] += v / (n * t * h) as f64;
                            tr[[ti, li]] += v / (n * h * q) as f64;
                        }
                    }
                }
            }
        }
        let close = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&acc.profile(ProfileKind::Modality).unwrap(), &modality.insert_axis(Axis(0))));
        assert!(close(&acc.profile(ProfileKind::PerHead).unwrap(), &per_head));
        assert!(close(&acc.profile(ProfileKind::PerQuery).unwrap(), &per_query));
        assert!(close(&acc.profile(ProfileKind::TrResolved).unwrap(), &tr));
        for kind in ProfileKind::ALL {
            assert_rows_sum_to_one(&acc.profile(kind).unwrap());
        }
    }

    #[test]
    fn split_batches_and_merged_workers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 6, 3, 2, 2, 4);
        let mut whole = AttributionAccumulator::new();
        whole.accumulate(batch.view()).unwrap();

        let mut first = AttributionAccumulator::new();
        first.accumulate(batch.slice(ndarray::s![..2, .., .., .., ..])).unwrap();
        let mut second = AttributionAccumulator::new();
        second.accumulate(batch.slice(ndarray::s![2.., .., .., .., ..])).unwrap();
        let mut merged = AttributionAccumulator::new();
        merged.merge(&second).unwrap();
        merged.merge(&first).unwrap();
        for kind in ProfileKind::ALL {
            let a = whole.profile(kind).unwrap();
            let b = merged.profile(kind).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn modality_profile_is_mean_of_head_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acc = AttributionAccumulator::new();
        acc.accumulate(random_batch(&mut rng, 3, 5, 4, 3, 6).view()).unwrap();
        let heads = acc.profile(ProfileKind::PerHead).unwrap();
        let queries = acc.profile(ProfileKind::PerQuery).unwrap();
        let modality = acc.modality_profile().unwrap();
        for (a, b) in heads.mean_axis(Axis(0)).unwrap().iter().zip(modality.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in queries.mean_axis(Axis(0)).unwrap().iter().zip(modality.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_one_column_per_layer() {
        let p = Array4::from_elem((1, 1, 2, 3), 1.0 / 3.0);
        let mut acc = AttributionAccumulator::new();
        acc.accumulate_window(p.view()).unwrap();
        let csv = profile_csv(&acc.profile(ProfileKind::PerQuery).unwrap(), ProfileKind::PerQuery);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "query,layer0,layer1,layer2");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,"));
    }
}
