use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use tricat::catalog::Split;
use tricat::cli::{run, Cli};
use tricat::trainer::{Checkpoint, MetricsRecord};

const SMALL: &[&str] = &[
    "synth.n_artists=12",
    "split.n_artists=10",
    "split.n_albums=20",
    "train.steps=20",
    "train.eval_every=10",
    "train.batch_size=4",
    "train.val_tuples=16",
    "eval.trials=100",
    "eval.log_trials=true",
    "ablate.seeds=[0]",
    "ablate.negatives=[1, 2]",
    "ablate.artist_counts=[5, 10]",
];

fn tricat(out: &Path, extra: &[&str]) -> tricat::Result<()> {
    let mut args = vec!["tricat".to_string(), "--out".into(), out.display().to_string()];
    for s in SMALL {
        args.push("--set".into());
        args.push(s.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    run(Cli::try_parse_from(args).expect("arguments parse"))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["synth", "split", "train", "eval-holdout", "eval-transfer"] {
        tricat(out, &[cmd]).unwrap_or_else(|e| panic!("{cmd}: {e}"));
    }
    for f in [
        "synth/metadata.csv",
        "synth/probe_train.csv",
        "synth/probe_test.csv",
        "synth/config.resolved.toml",
        "splits/artist_split.json",
        "splits/album_split.json",
        "train/checkpoint.json",
        "train/metrics.jsonl",
        "eval/holdout.json",
        "eval/holdout.csv",
        "eval/holdout_trials.jsonl",
        "eval/transfer.json",
        "eval/transfer.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let artist = Split::from_json(&fs::read_to_string(out.join("splits/artist_split.json")).unwrap()).unwrap();
    assert_eq!(artist.groups.len(), 10);

    let log: Vec<MetricsRecord> = fs::read_to_string(out.join("train/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), [10, 20]);
    assert!(log.iter().all(|r| r.loss_total.is_finite() && r.wall_time_s.is_none()));

    let holdout_csv = fs::read_to_string(out.join("eval/holdout.csv")).unwrap();
    assert!(holdout_csv.starts_with("concept,n_negatives,trials,correct,accuracy,seed\n"));
    assert_eq!(holdout_csv.lines().count(), 4);
    let trials = fs::read_to_string(out.join("eval/holdout_trials.jsonl")).unwrap();
    assert_eq!(trials.lines().count(), 300);

    let transfer: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval/transfer.json")).unwrap()).unwrap();
    let models: Vec<&str> = transfer.as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["encoder", "baseline_mean"]);

    // The resolved echo reproduces the run's config.
    let echo = fs::read_to_string(out.join("train/config.resolved.toml")).unwrap();
    let again = tricat::config::RunConfig::resolve(&echo, &[], None).unwrap();
    assert_eq!(again.to_toml(), echo);
}

#[test]
fn split_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    tricat(dir.path(), &["synth"]).unwrap();
    tricat(dir.path(), &["split"]).unwrap();
    let first = fs::read(dir.path().join("splits/album_split.json")).unwrap();
    tricat(dir.path(), &["split"]).unwrap();
    assert_eq!(first, fs::read(dir.path().join("splits/album_split.json")).unwrap());
}

#[test]
fn training_resumes_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["synth", "split", "train"] {
        tricat(out, &[cmd]).unwrap();
    }
    let straight = Checkpoint::load(&out.join("train/checkpoint.json")).unwrap();

    // Stop at step 10, then resume to 20.
    let half = out.join("half");
    tricat(&half, &["synth"]).unwrap();
    tricat(&half, &["split"]).unwrap();
    tricat(&half, &["--set", "train.steps=10", "train"]).unwrap();
    let ck = half.join("train/checkpoint.json");
    let resume_from = half.join("step10.json");
    fs::copy(&ck, &resume_from).unwrap();
    tricat(&half, &["--checkpoint", resume_from.to_str().unwrap(), "train"]).unwrap();
    let resumed = Checkpoint::load(&ck).unwrap();

    assert_eq!(resumed.state.step, 20);
    assert_eq!(resumed.state.params, straight.state.params);
    assert_eq!(resumed.state.log, straight.state.log);
}

#[test]
fn mismatched_encoder_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "split", "train"] {
        tricat(dir.path(), &[cmd]).unwrap();
    }
    let err = tricat(dir.path(), &["--set", "encoder.embedding_dim=16", "eval-holdout"]).unwrap_err();
    assert!(err.to_string().contains("encoder"), "{err}");
}

#[test]
fn ablation_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    tricat(out, &["synth"]).unwrap();
    tricat(out, &["ablate", "--axis", "scale"]).unwrap();
    let csv = fs::read_to_string(out.join("ablate/scale.csv")).unwrap();
    assert!(csv.starts_with("axis,concept_or_dataset,accuracy,seed\n"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablate/scale.json")).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["n_albums"].as_u64().unwrap(), 2 * row["axis"].as_u64().unwrap());
    }
    let keys: Vec<&str> =
        report["rows"].as_array().unwrap().iter().map(|r| r["concept_or_dataset"].as_str().unwrap()).collect();
    assert!(keys.contains(&"holdout_mean") && keys.contains(&"probe_genre"), "{keys:?}");

    tricat(out, &["ablate", "--axis", "negatives"]).unwrap();
    let neg = fs::read_to_string(out.join("ablate/negatives.csv")).unwrap();
    // 2 values × 1 seed × (3 concepts + mean + probe)
    assert_eq!(neg.lines().count(), 1 + 2 * 5);
}

#[test]
fn misspelled_section_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[los]\nmargin_artist = 0.3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tricat"))
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    assert_eq!(err["error"]["module"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("los.margin_artist"), "{stderr}");
}

#[test]
fn out_directory_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_tricat"))
        .env("TRICAT_OUT", dir.path())
        .args(["--set", "synth.n_artists=5", "synth"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("synth/metadata.csv").is_file());
}
