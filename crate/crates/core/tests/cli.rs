use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use layergate::brain_encoder::read_checkpoint;
use layergate::cli::main_with_args;
use layergate::config::{Preset, RunConfig};
use layergate::evaluator::{predict_windows, ScoreTable};
use layergate::feature_store::{read_features, read_matrix, Manifest};

const TINY: &str = r#"
[data.planted]
n_windows = 12
parcels = 6
frames = 20
k_out = 5
[data.planted.plans.vision]
layers = 4
hidden = 8
planted_layer = 2
[data.planted.plans.audio]
layers = 4
hidden = 8
planted_layer = 1
[data.planted.plans.text]
layers = 4
hidden = 8
planted_layer = 3
[model.pooler_config]
n_queries = 2
heads = 2
[model.encoder]
hidden = 16
depth = 1
heads = 2
max_frames = 20
[train]
epochs = 2
batch_size = 4
[eval]
attribution_batches = 1
attribution_batch_size = 2
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY}\n{extra}")).unwrap();
    (dir, cfg)
}

fn run(cfg: &Path, out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["layergate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    main_with_args(argv)
}

fn resolved(cfg: &Path) -> RunConfig {
    RunConfig::load(Preset::Desk, Some(cfg)).unwrap()
}

#[test]
fn generate_writes_rereadable_manifest_deterministically() {
    let (dir, cfg) = setup("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&cfg, &a, &["generate"]), 0);
    assert_eq!(run(&cfg, &b, &["generate"]), 0);
    let manifest = Manifest::read(a.join("data/manifest.json")).unwrap();
    assert_eq!(manifest.windows.len(), 12);
    for e in &manifest.windows {
        for m in layergate::modality::Modality::ALL {
            let name = e.features.get(m);
            let f = read_features(a.join("data").join(name)).unwrap();
            assert_eq!((f.layers(), f.frames(), f.hidden()), (4, 20, 8));
            assert_eq!(fs::read(a.join("data").join(name)).unwrap(), fs::read(b.join("data").join(name)).unwrap());
        }
        assert_eq!(read_matrix(a.join("data").join(&e.target)).unwrap().dim(), (5, 6));
    }
    assert!(a.join("resolved_config.toml").exists());
}

#[test]
fn train_outputs_are_idempotent_and_checkpoint_resumes_exactly() {
    let (dir, cfg) = setup("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&cfg, &a, &["train"]), 0);
    assert_eq!(run(&cfg, &b, &["train"]), 0);
    for f in ["model.ckpt", "train_log.tsv", "history.csv", "val_scores.csv", "resolved_config.toml"] {
        assert!(a.join(f).exists(), "{f}");
        if f != "resolved_config.toml" {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
    let mut c = resolved(&cfg);
    c.out = a.clone();
    let data = c.dataset().unwrap();
    let split = data.split(c.train.val_fraction).unwrap();
    let log = fs::read_to_string(a.join("train_log.tsv")).unwrap();
    let steps = 2 * split.train.len().div_ceil(c.train.batch_size);
    assert_eq!(log.lines().filter(|l| l.starts_with("step\t")).count(), steps);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch\t")).count(), 2);
    let ckpt = read_checkpoint(a.join("model.ckpt")).unwrap();
    let reloaded = read_checkpoint(a.join("model.ckpt")).unwrap();
    let all = ckpt.model.config.modalities;
    assert_eq!(
        predict_windows(&ckpt.model, &data, &split.val, all).unwrap(),
        predict_windows(&reloaded.model, &data, &split.val, all).unwrap()
    );
}

#[test]
fn ablation_with_everything_active_matches_evaluate() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["train"]), 0);
    assert_eq!(run(&cfg, &out, &["evaluate"]), 0);
    assert_eq!(run(&cfg, &out, &["ablate"]), 0);
    assert_eq!(
        fs::read_to_string(out.join("eval_scores.csv")).unwrap(),
        fs::read_to_string(out.join("ablation_full.csv")).unwrap()
    );
    let summary = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(out.join("dominant_modality.csv").exists());
    assert!(out.join("ablation_drops.png").exists());
}

#[test]
fn single_member_ensemble_reproduces_member() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["train"]), 0);
    assert_eq!(run(&cfg, &out, &["ensemble", "--member", out.join("model.ckpt").to_str().unwrap()]), 0);
    let ens = ScoreTable::from_csv(&fs::read_to_string(out.join("ensemble_scores.csv")).unwrap()).unwrap();
    let member = ScoreTable::from_csv(&fs::read_to_string(out.join("val_scores.csv")).unwrap()).unwrap();
    for (a, b) in ens.pearson.iter().zip(member.pearson.iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut c = resolved(&cfg);
    c.out = out.clone();
    let data = c.dataset().unwrap();
    let split = data.split(c.train.val_fraction).unwrap();
    let ckpt = read_checkpoint(out.join("model.ckpt")).unwrap();
    let preds = predict_windows(&ckpt.model, &data, &split.val, ckpt.model.config.modalities).unwrap();
    for (mut p, &i) in preds.into_iter().zip(&split.val) {
        let w = &data.windows[i];
        ckpt.denormalize(w.subject, &mut p);
        let written = read_matrix(out.join("ensemble/pred").join(format!("{}_subject{}.mirp", w.id, w.subject))).unwrap();
        assert_eq!(written, p);
    }
    let manifest = layergate::ensembler::EnsembleManifest::read(out.join("ensemble/ensemble.json")).unwrap();
    assert_eq!(manifest.members.len(), 1);
    assert!(manifest.members[0].scores.exists());
}

#[test]
fn sweep_writes_one_row_per_job_and_feeds_the_ensemble() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["sweep-nq", "--grid", "1,4", "--repeats", "2"]), 0);
    let csv = fs::read_to_string(out.join("sweep_nq.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("1,0,33,") && rows[1].starts_with("1,1,34,"));
    assert!(rows[2].starts_with("4,0,33,") && rows[3].starts_with("4,1,34,"));
    assert!(out.join("sweep_nq.png").exists());
    let registry = out.join("sweep/registry.json");
    assert_eq!(run(&cfg, &out, &["ensemble", "--registry", registry.to_str().unwrap()]), 0);
    let manifest = layergate::ensembler::EnsembleManifest::read(out.join("ensemble/ensemble.json")).unwrap();
    assert_eq!(manifest.members.len(), 3);
}

#[test]
fn attribution_probe_baseline_and_subsets_emit_artifacts() {
    let (dir, cfg) = setup("[sweep]\nnq_grid = [1]\n");
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["train", "--capture-attn"]), 0);
    for m in ["vision", "audio", "text"] {
        for k in ["modality", "per_head", "per_query", "tr_resolved"] {
            assert!(out.join(format!("attribution/{m}_{k}.csv")).exists());
            assert!(out.join(format!("attribution/{m}_{k}.png")).exists());
        }
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("attribution/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["batches"], 1);
    assert_eq!(run(&cfg, &out, &["attribute", "--batches", "2"]), 0);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("attribution/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["batches"], 2);

    assert_eq!(run(&cfg, &out, &["probe"]), 0);
    let probes = fs::read_to_string(out.join("probes.csv")).unwrap();
    let stages: Vec<&str> = probes.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["input", "post_pooler", "post_trunk", "output"]);

    assert_eq!(run(&cfg, &out, &["baseline"]), 0);
    let hist = fs::read_to_string(out.join("baseline_lambda.csv")).unwrap();
    assert_eq!(hist.lines().count(), 100);

    let sub = dir.path().join("s");
    assert_eq!(run(&cfg, &sub, &["--modalities", "vision,text", "subsets"]), 0);
    let subsets = fs::read_to_string(sub.join("subsets.csv")).unwrap();
    assert_eq!(subsets.lines().count(), 4);
}

#[test]
fn mean_pooler_has_no_attention_to_attribute() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    assert_eq!(run(&cfg, &out, &["--pooler", "mean", "train"]), 0);
    assert_eq!(run(&cfg, &out, &["attribute"]), 2);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_layergate");
    let (dir, cfg) = setup("");
    let out = dir.path().join("o");
    let status = |args: &[&str]| Command::new(exe).args(args).status().unwrap().code().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(status(&["--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "generate"]), 2);
    assert_eq!(status(&["--preset", "huge", "generate"]), 2);
    assert_eq!(status(&["--modalities", "", "generate"]), 2);

    let unstable = dir.path().join("unstable.toml");
    fs::write(&unstable, format!("{TINY}\n[train]\npeak_lr = 1e300\nclip_norm = 1e300\n").replace("[train]\nepochs = 2\nbatch_size = 4\n", "")).unwrap();
    assert_eq!(status(&["--config", unstable.to_str().unwrap(), "--out", out.to_str().unwrap(), "train"]), 3);

    assert_eq!(status(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "generate"]), 0);
}

#[test]
fn library_commands_create_their_output_directory() {
    let (dir, cfg) = setup("");
    let mut c = resolved(&cfg);
    c.out = dir.path().join("fresh/nested");
    layergate::cli::cmd_baseline(&c).unwrap();
    assert!(c.out.join("baseline_scores.csv").exists());
}
