//! Command-line entry points. Each command resolves the run configuration,
//! echoes it into the output directory and writes CSV and PNG artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};

use crate::attribution::{capture_attention, write_profile_csv, ProfileKind};
use crate::brain_encoder::{read_checkpoint, write_checkpoint, BrainEncoder, Checkpoint};
use crate::config::{Preset, RunConfig};
use crate::ensembler::{compute_weights, ensemble_predict, select_top_n, EnsembleManifest, RegistryEntry};
use crate::evaluator::{
    ablate_against, dominant_modality, predict_windows, read_network_map, score_model, score_predictions, stage_probes,
    subset_run, synthetic_networks, ScoreTable, Stage,
};
use crate::feature_store::{write_matrix, Dataset, Split};
use crate::layer_gating::PoolerKind;
use crate::modality::{Modality, ModalitySet};
use crate::plot::{write_heatmap, write_line_chart};
use crate::ridge_baseline::{lambda_histogram, run_baseline};
use crate::trainer::{train, TrainOutcome};
use crate::{Error, Result};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "layergate", version, about = "Layer-pooled multimodal brain encoding")]
pub struct Cli {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    pub preset: Preset,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pooler: Option<PoolerKind>,
    /// Modality subset, e.g. `vision,text` or `va`.
    #[arg(long, global = true)]
    pub modalities: Option<ModalitySet>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the planted dataset and its manifest.
    Generate,
    /// Train a model and write the best checkpoint.
    Train {
        /// Also run attention attribution on the trained model.
        #[arg(long)]
        capture_attn: bool,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Score a checkpoint on the validation split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Null each modality in turn and report per-parcel drops.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Layer-mean ridge baseline with leave-one-out penalty selection.
    Baseline,
    /// Validation-weighted ensemble of trained checkpoints.
    Ensemble {
        /// Member checkpoint; repeat for several.
        #[arg(long = "member")]
        members: Vec<PathBuf>,
        /// Registry written by `sweep-nq`; its top entries become members.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Attention attribution profiles for a checkpoint.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of validation batches to average over.
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        capture_attn: bool,
    },
    /// Train one model per query count and report validation scores.
    SweepNq {
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Ridge probes on intermediate representations of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per non-empty modality subset.
    Subsets,
}

impl Cli {
    /// Preset, config file and flag overrides, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.preset, self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(p) = self.pooler {
            cfg.model.pooler = p;
        }
        if let Some(m) = self.modalities {
            cfg.model.modalities = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    cfg.write_echo(&cfg.out)?;
    match &cli.command {
        Command::Generate => {
            let path = cmd_generate(&cfg)?;
            println!("{}", path.display());
        }
        Command::Train { capture_attn, batches } => {
            let report = cmd_train(&cfg)?;
            println!("{}\tval_pearson\t{:.6}", report.checkpoint.display(), report.best_val_pearson);
            if *capture_attn {
                cmd_attribute(&cfg, &report.checkpoint, batches.unwrap_or(cfg.eval.attribution_batches))?;
            }
        }
        Command::Evaluate { checkpoint } => {
            let t = cmd_evaluate(&cfg, &checkpoint_path(&cfg, checkpoint))?;
            println!("mean_pearson\t{:.6}", t.mean());
        }
        Command::Ablate { checkpoint } => {
            cmd_ablate(&cfg, &checkpoint_path(&cfg, checkpoint))?;
        }
        Command::Baseline => {
            let t = cmd_baseline(&cfg)?;
            println!("mean_pearson\t{:.6}", t.mean());
        }
        Command::Ensemble { members, registry } => {
            let mut paths = members.clone();
            if let Some(r) = registry {
                let reg: Vec<RegistryEntry> = serde_json::from_str(&fs::read_to_string(r)?)?;
                paths.extend(select_top_n(&reg, cfg.ensemble.top_n).into_iter().map(|e| e.checkpoint));
            }
            if paths.is_empty() {
                paths.push(checkpoint_path(&cfg, &None));
            }
            let t = cmd_ensemble(&cfg, &paths)?;
            println!("mean_pearson\t{:.6}", t.mean());
        }
        Command::Attribute { checkpoint, batches, .. } => {
            cmd_attribute(&cfg, &checkpoint_path(&cfg, checkpoint), batches.unwrap_or(cfg.eval.attribution_batches))?;
        }
        Command::SweepNq { grid, repeats } => {
            let mut cfg = cfg.clone();
            if let Some(g) = grid {
                cfg.sweep.nq_grid = g.clone();
            }
            if let Some(r) = repeats {
                cfg.sweep.repeats = *r;
            }
            cfg.validate()?;
            for (nq, mean) in cmd_sweep_nq(&cfg)? {
                println!("{nq}\t{mean:.6}");
            }
        }
        Command::Probe { checkpoint } => {
            for (stage, t) in cmd_probe(&cfg, &checkpoint_path(&cfg, checkpoint))? {
                println!("{}\t{:.6}", stage.name(), t.mean());
            }
        }
        Command::Subsets => {
            for (subset, t) in cmd_subsets(&cfg)? {
                println!("{}\t{:.6}", subset.label(), t.mean());
            }
        }
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"))
}

/// Loads the data and split, creating the output directory.
fn load_data(cfg: &RunConfig) -> Result<(Dataset, Split)> {
    fs::create_dir_all(&cfg.out)?;
    let data = cfg.dataset()?;
    let split = data.split(cfg.train.val_fraction)?;
    Ok((data, split))
}

fn networks(cfg: &RunConfig, parcels: usize) -> Result<Vec<usize>> {
    match &cfg.eval.networks {
        Some(p) => read_network_map(p, parcels),
        None => Ok(synthetic_networks(parcels)),
    }
}

fn write_scores(cfg: &RunConfig, table: ScoreTable, stem: &str) -> Result<ScoreTable> {
    let parcels = table.pearson.ncols();
    let table = table.with_networks(networks(cfg, parcels)?)?;
    table.write_csv(cfg.out.join(format!("{stem}.csv")))?;
    write_heatmap(&table.pearson, cfg.out.join(format!("{stem}.png")))?;
    if let Some(means) = table.network_means() {
        let mut s = String::from("network,mean_pearson\n");
        for (i, v) in means.iter().enumerate() {
            writeln!(s, "{i},{v:.17e}").unwrap();
        }
        fs::write(cfg.out.join(format!("{stem}_networks.csv")), s)?;
    }
    Ok(table)
}

/// Writes the dataset described by the config; returns the manifest path.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.dataset()?.write(cfg.out.join("data"))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub best_val_pearson: f64,
    pub best_epoch: usize,
}

/// Trains from the config and writes the checkpoint, log and curves.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    fs::create_dir_all(&cfg.out)?;
    let (data, split) = load_data(cfg)?;
    let model = BrainEncoder::new(cfg.model_config(&data), cfg.train.seed)?;
    let outcome = train(model, &data, &split, &cfg.train)?;
    write_training_artifacts(cfg, &outcome, &cfg.out)?;
    let path = cfg.out.join("model.ckpt");
    write_checkpoint(&outcome.checkpoint, &path)?;
    let scores = score_model(&outcome.checkpoint.model, &data, &split.val, cfg.model.modalities)?;
    write_scores(cfg, scores, "val_scores")?;
    Ok(TrainReport {
        checkpoint: path,
        best_val_pearson: outcome.best_val_pearson,
        best_epoch: outcome.best_epoch,
    })
}

fn write_training_artifacts(cfg: &RunConfig, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train_log.tsv"), &outcome.log)?;
    let mut s = String::from("epoch,train_loss,val_pearson\n");
    for r in &outcome.history {
        writeln!(s, "{},{:.17e},{:.17e}", r.epoch, r.train_loss, r.val_pearson).unwrap();
    }
    fs::write(dir.join("history.csv"), s)?;
    let curve: Vec<(f64, f64)> = outcome.history.iter().map(|r| (r.epoch as f64, r.val_pearson)).collect();
    if curve.len() > 1 || cfg.train.epochs == 1 {
        write_line_chart(&[curve], dir.join("val_curve.png"))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<ScoreTable> {
    let ckpt = load_model(checkpoint)?;
    let (data, split) = load_data(cfg)?;
    let model = &ckpt.model;
    let t = score_model(model, &data, &split.val, model.config.modalities)?;
    write_scores(cfg, t, "eval_scores")
}

/// Per-modality ablation tables; `ablation.csv` summarizes mean drops.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<(Modality, ScoreTable)>> {
    let ckpt = load_model(checkpoint)?;
    let (data, split) = load_data(cfg)?;
    let model = &ckpt.model;
    let full = score_model(model, &data, &split.val, model.config.modalities)?;
    let full = write_scores(cfg, full, "ablation_full")?;
    let mut summary = String::from("modality,full_mean,ablated_mean,mean_drop\n");
    let mut drops = Array2::zeros((3, data.parcels));
    let mut out = Vec::new();
    for m in model.config.modalities.iter() {
        let a = ablate_against(model, &data, &split.val, m, &full)?;
        let drop = a.drop.mean_axis(Axis(0)).expect("at least one subject");
        drops.row_mut(m.index()).assign(&drop);
        writeln!(summary, "{},{:.17e},{:.17e},{:.17e}", m.name(), full.mean(), a.scores.mean(), full.mean() - a.scores.mean()).unwrap();
        ScoreTable::new(a.drop.clone()).write_csv(cfg.out.join(format!("ablation_drop_{}.csv", m.name())))?;
        out.push((m, a.scores));
    }
    fs::write(cfg.out.join("ablation.csv"), summary)?;
    let (dom, strength) = dominant_modality(drops.view());
    let mut s = String::from("parcel,modality,strength\n");
    for (p, (m, v)) in dom.iter().zip(strength.iter()).enumerate() {
        writeln!(s, "{p},{},{v:.17e}", m.name()).unwrap();
    }
    fs::write(cfg.out.join("dominant_modality.csv"), s)?;
    write_heatmap(&drops, cfg.out.join("ablation_drops.png"))?;
    Ok(out)
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<ScoreTable> {
    let (data, split) = load_data(cfg)?;
    let res = run_baseline(&data, &split.train, &split.val, cfg.model.modalities, &cfg.ridge)?;
    let hist = lambda_histogram(&res.chosen_lambda, &cfg.ridge.lambdas);
    let mut s = String::from("lambda,count\n");
    for (l, c) in cfg.ridge.lambdas.iter().zip(&hist) {
        writeln!(s, "{l:.17e},{c}").unwrap();
    }
    fs::write(cfg.out.join("baseline_lambda.csv"), s)?;
    let pts: Vec<(f64, f64)> = cfg.ridge.lambdas.iter().zip(&hist).map(|(l, &c)| (l.log10(), c as f64)).collect();
    write_line_chart(&[pts], cfg.out.join("baseline_lambda.png"))?;
    write_scores(cfg, res.scores, "baseline_scores")
}

/// Ensembles `members` with weights from their validation scores and
/// writes per-window predictions in target units.
pub fn cmd_ensemble(cfg: &RunConfig, members: &[PathBuf]) -> Result<ScoreTable> {
    if members.is_empty() {
        return Err(Error::config("ensemble needs at least one member"));
    }
    let (data, split) = load_data(cfg)?;
    let dir = cfg.out.join("ensemble");
    fs::create_dir_all(dir.join("pred"))?;
    let mut rho = Array3::zeros((members.len(), data.n_subjects, data.parcels));
    let mut preds: Vec<Vec<Array2<f64>>> = Vec::with_capacity(members.len());
    let mut entries = Vec::with_capacity(members.len());
    for (k, path) in members.iter().enumerate() {
        let ckpt = load_model(path)?;
        let model = &ckpt.model;
        let mut p = predict_windows(model, &data, &split.val, model.config.modalities)?;
        for (pred, &i) in p.iter_mut().zip(&split.val) {
            ckpt.denormalize(data.windows[i].subject, pred);
        }
        let table = score_predictions(&data, &split.val, &p)?;
        rho.index_axis_mut(Axis(0), k).assign(&table.pearson);
        let scores = dir.join(format!("member{k}_scores.csv"));
        table.write_csv(&scores)?;
        entries.push(RegistryEntry {
            checkpoint: path.clone(),
            scores,
            val_pearson: table.mean(),
        });
        preds.push(p);
    }
    let weights = compute_weights(rho.view(), cfg.ensemble.tau)?;
    let mut combined = Vec::with_capacity(split.val.len());
    for (j, &i) in split.val.iter().enumerate() {
        let w = &data.windows[i];
        let views: Vec<_> = preds.iter().map(|p| p[j].view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        let out = ensemble_predict(stacked.view(), weights.index_axis(Axis(1), w.subject))?;
        write_matrix(&out, dir.join("pred").join(format!("{}_subject{}.mirp", w.id, w.subject)))?;
        combined.push(out);
    }
    EnsembleManifest {
        tau: cfg.ensemble.tau,
        members: entries,
    }
    .write(dir.join("ensemble.json"))?;
    let table = score_predictions(&data, &split.val, &combined)?;
    write_scores(cfg, table, "ensemble_scores")
}

/// Writes profile CSVs and heatmaps under `attribution/`; returns the
/// modality profiles `(L)` of each captured modality.
pub fn cmd_attribute(cfg: &RunConfig, checkpoint: &Path, batches: usize) -> Result<Vec<(Modality, ndarray::Array1<f64>)>> {
    let ckpt = load_model(checkpoint)?;
    let (data, split) = load_data(cfg)?;
    let bs = cfg.eval.attribution_batch_size;
    let acc = capture_attention(&ckpt.model, &data, &split.val, batches, bs)?;
    let dir = cfg.out.join("attribution");
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    let mut windows = 0;
    for (m, a) in acc.iter() {
        let Some(a) = a else { continue };
        windows = a.windows();
        for kind in ProfileKind::ALL {
            let p = a.profile(kind)?;
            write_profile_csv(&p, kind, dir.join(format!("{}_{}.csv", m.name(), kind.name())))?;
            write_heatmap(&p, dir.join(format!("{}_{}.png", m.name(), kind.name())))?;
        }
        out.push((m, a.modality_profile()?));
    }
    if out.is_empty() {
        return Err(Error::config("attribution needs a cross-attention pooler"));
    }
    let meta = serde_json::json!({
        "checkpoint": checkpoint,
        "batches": batches,
        "batch_size": bs,
        "windows": windows,
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(out)
}

/// One training run per `(n_q, repeat)`; returns the mean score per `n_q`.
pub fn cmd_sweep_nq(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let (data, split) = load_data(cfg)?;
    let dir = cfg.out.join("sweep");
    let mut rows = String::from("n_queries,repeat,seed,val_pearson\n");
    let mut registry = Vec::new();
    let mut curve = Vec::new();
    for &nq in &cfg.sweep.nq_grid {
        let mut total = 0.0;
        for r in 0..cfg.sweep.repeats {
            let mut c = cfg.clone();
            c.model.pooler_config.n_queries = nq;
            c.train.seed = cfg.train.seed + r as u64;
            let model = BrainEncoder::new(c.model_config(&data), c.train.seed)?;
            let outcome = train(model, &data, &split, &c.train)?;
            let run_dir = dir.join(format!("nq{nq}_r{r}"));
            write_training_artifacts(&c, &outcome, &run_dir)?;
            let ckpt = run_dir.join("model.ckpt");
            write_checkpoint(&outcome.checkpoint, &ckpt)?;
            let scores = run_dir.join("val_scores.csv");
            let table = score_model(&outcome.checkpoint.model, &data, &split.val, c.model.modalities)?;
            table.write_csv(&scores)?;
            writeln!(rows, "{nq},{r},{},{:.17e}", c.train.seed, table.mean()).unwrap();
            total += table.mean();
            registry.push(RegistryEntry {
                checkpoint: ckpt,
                scores,
                val_pearson: table.mean(),
            });
        }
        curve.push((nq, total / cfg.sweep.repeats as f64));
    }
    fs::write(cfg.out.join("sweep_nq.csv"), rows)?;
    fs::write(dir.join("registry.json"), serde_json::to_string_pretty(&registry)?)?;
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(n, v)| (n as f64, v)).collect();
    write_line_chart(&[pts], cfg.out.join("sweep_nq.png"))?;
    Ok(curve)
}

pub fn cmd_probe(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<(Stage, ScoreTable)>> {
    let ckpt = load_model(checkpoint)?;
    let (data, split) = load_data(cfg)?;
    let stages = [Stage::Input, Stage::PostPooler, Stage::PostTrunk, Stage::Output];
    let res = stage_probes(&ckpt.model, &data, &split, &stages, &cfg.ridge)?;
    let mut s = String::from("stage,mean_pearson\n");
    for (st, t) in &res {
        writeln!(s, "{},{:.17e}", st.name(), t.mean()).unwrap();
    }
    fs::write(cfg.out.join("probes.csv"), s)?;
    let pts: Vec<(f64, f64)> = res.iter().enumerate().map(|(i, (_, t))| (i as f64, t.mean())).collect();
    write_line_chart(&[pts], cfg.out.join("probes.png"))?;
    Ok(res)
}

/// Trains one model per non-empty subset of the configured modalities.
pub fn cmd_subsets(cfg: &RunConfig) -> Result<Vec<(ModalitySet, ScoreTable)>> {
    let (data, split) = load_data(cfg)?;
    let mc = cfg.model_config(&data);
    let mut s = String::from("subset,mean_pearson\n");
    let mut out = Vec::new();
    for bits in 1u8..8 {
        let subset = ModalitySet::from_iter(Modality::ALL.into_iter().filter(|m| bits & (1 << m.index()) != 0));
        if subset.iter().any(|m| !cfg.model.modalities.contains(m)) {
            continue;
        }
        let (table, _) = subset_run(&data, &split, subset, &mc, &cfg.train)?;
        table.write_csv(cfg.out.join(format!("subset_{}.csv", subset.label())))?;
        writeln!(s, "{},{:.17e}", subset.label(), table.mean()).unwrap();
        out.push((subset, table));
    }
    fs::write(cfg.out.join("subsets.csv"), s)?;
    Ok(out)
}
