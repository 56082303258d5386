//! `tricat` command implementations.
//!
//! Output layout under `--out` (default `$TRICAT_OUT`, else `tricat-out`):
//!
//! ```text
//! synth/    metadata.csv, features/, probe/, probe_{train,test}.csv
//! splits/   artist_split.json, album_split.json
//! train/    checkpoint.json, metrics.jsonl
//! eval/     holdout.{json,csv}, transfer.{json,csv}
//! ablate/   negatives.{json,csv}, scale.{json,csv}
//! ```
//!
//! Every command directory also gets `config.resolved.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::catalog::{build_album_split, build_artist_split, load_catalog, validate_split, CatalogIndex, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::ablation::{ablate_negatives, ablate_scale, AblationSetup};
use crate::eval::holdout::holdout_trials;
use crate::eval::probe::{baseline_probe, transfer_probe, ProbeDataset, ProbeSet};
use crate::features::{FeatureMatrix, FeatureStore};
use crate::sampler::Concept;
use crate::synth::generate_catalog;
use crate::trainer::{metrics_jsonl, Checkpoint, TrainData, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tricat", version, about = "Artist/album/track similarity learning experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    /// Output root.
    #[arg(long, global = true, env = "TRICAT_OUT", default_value = "tricat-out")]
    pub out: PathBuf,
    /// Root seed; component seeds not set explicitly derive from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint to resume from (train) or evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Negatives,
    Scale,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog with features and probe sets.
    Synth,
    /// Build the artist- and album-basis splits.
    Split,
    /// Train an encoder; writes checkpoints and a metrics log.
    Train,
    /// Hold-out positive/negative prediction accuracy.
    EvalHoldout,
    /// Linear genre probe on song embeddings, with the raw-feature baseline.
    EvalTransfer {
        #[arg(long)]
        probe_train: Option<PathBuf>,
        #[arg(long)]
        probe_test: Option<PathBuf>,
    },
    /// Negative-count or training-scale sweep.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn or_default(configured: &str, default: PathBuf) -> PathBuf {
    if configured.is_empty() {
        default
    } else {
        PathBuf::from(configured)
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

impl Ctx {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write(&d.join("config.resolved.toml"), self.cfg.to_toml())?;
        Ok(d)
    }

    fn metadata_path(&self) -> PathBuf {
        or_default(&self.cfg.catalog.metadata, self.out.join("synth/metadata.csv"))
    }

    fn split_paths(&self) -> (PathBuf, PathBuf) {
        let s = &self.cfg.split;
        (
            or_default(&s.artist, self.out.join("splits/artist_split.json")),
            or_default(&s.album, self.out.join("splits/album_split.json")),
        )
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("train/checkpoint.json"))
    }

    fn catalog(&self) -> Result<CatalogIndex> {
        let loaded = load_catalog(&self.metadata_path(), self.cfg.encoder.input_frames as u32)?;
        for r in &loaded.rejected {
            eprintln!(
                "warning: skipped track {} (line {}): {} frames < segment length {}",
                r.track_id, r.line, r.n_frames, r.segment_len
            );
        }
        Ok(loaded.index)
    }

    fn load_split(path: &Path) -> Result<Split> {
        Split::from_json(&read(path)?)
            .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }

    /// Splits needed by `concepts`.
    fn splits(&self, concepts: &[Concept]) -> Result<(Option<Split>, Option<Split>)> {
        let (ap, bp) = self.split_paths();
        let need_artist = concepts.iter().any(|c| *c != Concept::Album);
        let need_album = concepts.contains(&Concept::Album);
        let artist = need_artist.then(|| Self::load_split(&ap)).transpose()?;
        let album = need_album.then(|| Self::load_split(&bp)).transpose()?;
        Ok((artist, album))
    }

    fn probe_sets(
        &self,
        train: Option<PathBuf>,
        test: Option<PathBuf>,
    ) -> Result<[(ProbeDataset, Vec<FeatureMatrix>); 2]> {
        let e = &self.cfg.eval;
        let train = train.unwrap_or_else(|| or_default(&e.probe_train, self.out.join("synth/probe_train.csv")));
        let test = test.unwrap_or_else(|| or_default(&e.probe_test, self.out.join("synth/probe_test.csv")));
        let load = |p: &Path| -> Result<(ProbeDataset, Vec<FeatureMatrix>)> {
            let set = ProbeDataset::load(p)?;
            let feats = set.load_features(p.parent().unwrap_or(Path::new(".")))?;
            Ok((set, feats))
        };
        Ok([load(&train)?, load(&test)?])
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let ctx = Ctx { cfg, out: c.out, checkpoint: c.checkpoint };
    match cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Split => cmd_split(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::EvalHoldout => cmd_eval_holdout(&ctx),
        Command::EvalTransfer { probe_train, probe_test } => cmd_eval_transfer(&ctx, probe_train, probe_test),
        Command::Ablate { axis } => cmd_ablate(&ctx, axis),
    }
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    for w in ctx.cfg.synth.warnings() {
        eprintln!("warning: {w}");
    }
    let dir = ctx.dir("synth")?;
    let synth = generate_catalog(&ctx.cfg.synth, &dir)?;
    eprintln!("synth: {} tracks in {}", synth.catalog.len(), dir.display());
    Ok(())
}

fn cmd_split(ctx: &Ctx) -> Result<()> {
    let catalog = ctx.catalog()?;
    let s = &ctx.cfg.split;
    ctx.dir("splits")?;
    let (ap, bp) = ctx.split_paths();
    for (split, path) in [
        (build_artist_split(&catalog, s.n_artists, s.seed)?, ap),
        (build_album_split(&catalog, s.n_albums, s.seed)?, bp),
    ] {
        let report = validate_split(&split, &catalog);
        if let Some(issue) = report.issues.first() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, issue.to_string())));
        }
        write(&path, split.to_json() + "\n")?;
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let catalog = ctx.catalog()?;
    let store = FeatureStore::load(&catalog)?;
    let (artist, album) = ctx.splits(&cfg.train.concepts)?;
    let data =
        TrainData { catalog: &catalog, store: &store, artist_split: artist.as_ref(), album_split: album.as_ref() };
    let dir = ctx.dir("train")?;
    let mut trainer = match &ctx.checkpoint {
        Some(p) => {
            // Resuming may extend the run; everything else comes from the checkpoint.
            let mut ck = Checkpoint::restore(p, &cfg.encoder)?;
            ck.train.steps = cfg.train.steps;
            Trainer::resume(&ck, data)?
        }
        None => Trainer::new(&cfg.encoder, &cfg.train, &cfg.loss, data)?,
    };
    let ck_path = dir.join("checkpoint.json");
    let log_path = dir.join("metrics.jsonl");
    while !trainer.is_done() {
        trainer.run_steps(cfg.train.eval_every)?;
        trainer.checkpoint().save(&ck_path)?;
        write(&log_path, metrics_jsonl(trainer.log()))?;
        if let Some(r) = trainer.log().last() {
            eprintln!("step {}: loss {:.4}", r.step, r.loss_total);
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    write(&log_path, metrics_jsonl(trainer.log()))?;
    Ok(())
}

fn cmd_eval_holdout(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let ck = Checkpoint::restore(&ctx.checkpoint_path(), &cfg.encoder)?;
    let encoder = ck.best_encoder()?;
    let catalog = ctx.catalog()?;
    let store = FeatureStore::load(&catalog)?;
    let (artist, album) = ctx.splits(&cfg.eval.concepts)?;
    let dir = ctx.dir("eval")?;
    let e = &cfg.eval;
    let mut results = Vec::new();
    let mut trials_log = String::new();
    for &c in &e.concepts {
        let split = if c == Concept::Album { album.as_ref() } else { artist.as_ref() }.expect("loaded above");
        let (r, log) = holdout_trials(&encoder, &catalog, &store, split, c, e.n_negatives, e.trials, e.seed)?;
        if e.log_trials {
            for t in &log {
                trials_log += &(serde_json::to_string(&(c, t)).expect("serializable") + "\n");
            }
        }
        eprintln!("holdout {c}: {:.4}", r.accuracy);
        results.push(r);
    }
    let mut csv = String::from("concept,n_negatives,trials,correct,accuracy,seed\n");
    for r in &results {
        csv += &format!("{},{},{},{},{},{}\n", r.concept, r.n_negatives, r.trials, r.correct, r.accuracy, r.seed);
    }
    write(&dir.join("holdout.json"), json(&results))?;
    write(&dir.join("holdout.csv"), csv)?;
    if e.log_trials {
        write(&dir.join("holdout_trials.jsonl"), trials_log)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferReport {
    model: &'static str,
    accuracy: f64,
    lambda: f64,
    n_train: usize,
    n_test: usize,
    n_classes: usize,
}

fn cmd_eval_transfer(ctx: &Ctx, train: Option<PathBuf>, test: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ck = Checkpoint::restore(&ctx.checkpoint_path(), &cfg.encoder)?;
    let encoder = ck.best_encoder()?;
    let [(tr, trf), (te, tef)] = ctx.probe_sets(train, test)?;
    let train = ProbeSet { dataset: &tr, features: &trf };
    let test = ProbeSet { dataset: &te, features: &tef };
    let dir = ctx.dir("eval")?;
    let mut rows = Vec::new();
    for (model, r) in [
        ("encoder", transfer_probe(&encoder, train, test, &cfg.eval.probe)?),
        ("baseline_mean", baseline_probe(train, test, &cfg.eval.probe)?),
    ] {
        eprintln!("probe {model}: {:.4}", r.accuracy);
        rows.push(TransferReport {
            model,
            accuracy: r.accuracy,
            lambda: r.lambda,
            n_train: r.n_train,
            n_test: r.n_test,
            n_classes: r.n_classes,
        });
    }
    let mut csv = String::from("model,accuracy,lambda,n_train,n_test,n_classes\n");
    for r in &rows {
        csv += &format!("{},{},{},{},{},{}\n", r.model, r.accuracy, r.lambda, r.n_train, r.n_test, r.n_classes);
    }
    write(&dir.join("transfer.json"), json(&rows))?;
    write(&dir.join("transfer.csv"), csv)?;
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, axis: Axis) -> Result<()> {
    let cfg = &ctx.cfg;
    let catalog = ctx.catalog()?;
    let store = FeatureStore::load(&catalog)?;
    // Probe scoring is optional: use the probe sets only when they exist.
    let e = &cfg.eval;
    let default_probe = ctx.out.join("synth/probe_train.csv");
    let probe_present = !e.probe_train.is_empty() || default_probe.exists();
    let probe = probe_present.then(|| ctx.probe_sets(None, None)).transpose()?;
    let probe_sets = probe
        .as_ref()
        .map(|[(a, af), (b, bf)]| (ProbeSet { dataset: a, features: af }, ProbeSet { dataset: b, features: bf }));
    let setup = AblationSetup {
        catalog: &catalog,
        store: &store,
        probe: probe_sets,
        encoder: cfg.encoder.clone(),
        train: cfg.train.clone(),
        loss: cfg.loss.clone(),
        eval: e.eval_config(),
        n_artists: cfg.split.n_artists,
        n_albums: cfg.split.n_albums,
        split_seed: cfg.split.seed,
    };
    let a = &cfg.ablate;
    let (name, report) = match axis {
        Axis::Negatives => ("negatives", ablate_negatives(&setup, &a.negatives, &a.seeds)?),
        Axis::Scale => ("scale", ablate_scale(&setup, &a.artist_counts, &a.seeds)?),
    };
    let dir = ctx.dir("ablate")?;
    write(&dir.join(format!("{name}.csv")), report.to_csv())?;
    write(&dir.join(format!("{name}.json")), report.to_json() + "\n")?;
    Ok(())
}
