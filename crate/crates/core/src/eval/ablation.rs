//! Negative-count and training-scale ablations.
//!
//! Every trained model is scored the same way, on fixed reference splits
//! built from the whole catalog: hold-out accuracy per concept at
//! `eval.n_negatives`, their mean (the trend metric), and the genre probe
//! when probe data is supplied. Scale runs train on a subset of the
//! reference artists; because each group's train/val/test partition depends
//! only on the group, their held-out tracks are still unseen.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::holdout::{holdout_accuracy, DEFAULT_TRIALS};
use super::probe::{transfer_probe, ProbeConfig, ProbeSet};
use super::EvalError;
use crate::catalog::{build_album_split, build_artist_split, CatalogIndex, Split};
use crate::features::FeatureStore;
use crate::loss::LossConfig;
use crate::model::{Encoder, EncoderConfig};
use crate::sampler::Concept;
use crate::trainer::{train, TrainConfig, TrainData};

/// Row key of the mean hold-out accuracy over evaluated concepts.
pub const MEAN_KEY: &str = "holdout_mean";
pub const PROBE_KEY: &str = "probe_genre";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_negatives: usize,
    pub trials: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_negatives: 4, trials: DEFAULT_TRIALS, seed: 0, probe: ProbeConfig::default() }
    }
}

/// Shared inputs of an ablation sweep.
#[derive(Clone)]
pub struct AblationSetup<'a> {
    pub catalog: &'a CatalogIndex,
    pub store: &'a FeatureStore,
    /// Genre probe (train, test), if available.
    pub probe: Option<(ProbeSet<'a>, ProbeSet<'a>)>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    /// Size of the reference splits.
    pub n_artists: usize,
    pub n_albums: usize,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: usize,
    pub concept_or_dataset: String,
    pub accuracy: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_albums: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `negatives` or `scale`.
    pub axis: String,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// CSV with columns `axis,concept_or_dataset,accuracy,seed`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "concept_or_dataset", "accuracy", "seed"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.axis.to_string(),
                r.concept_or_dataset.clone(),
                r.accuracy.to_string(),
                r.seed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn get(&self, axis: usize, key: &str, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.axis == axis && r.concept_or_dataset == key && r.seed == seed).map(|r| r.accuracy)
    }
}

/// Reference splits the sweep evaluates on.
pub struct ReferenceSplits {
    pub artist: Split,
    pub album: Split,
}

impl AblationSetup<'_> {
    pub fn reference_splits(&self) -> Result<ReferenceSplits, EvalError> {
        Ok(ReferenceSplits {
            artist: build_artist_split(self.catalog, self.n_artists, self.split_seed)?,
            album: build_album_split(self.catalog, self.n_albums, self.split_seed)?,
        })
    }

    fn configs_for(&self, seed: u64) -> (EncoderConfig, TrainConfig) {
        let mut enc = self.encoder.clone();
        enc.seed = seed;
        let mut tc = self.train.clone();
        tc.seed = seed;
        (enc, tc)
    }
}

/// (key, accuracy) pairs for one trained encoder.
pub fn score_model(
    encoder: &Encoder,
    setup: &AblationSetup<'_>,
    refs: &ReferenceSplits,
) -> Result<Vec<(String, f64)>, EvalError> {
    let e = &setup.eval;
    let mut out = Vec::new();
    for c in Concept::ALL {
        let split = if c == Concept::Album { &refs.album } else { &refs.artist };
        let r = holdout_accuracy(encoder, setup.catalog, setup.store, split, c, e.n_negatives, e.trials, e.seed)?;
        out.push((c.name().to_string(), r.accuracy));
    }
    let mean = out.iter().map(|(_, a)| a).sum::<f64>() / out.len() as f64;
    out.push((MEAN_KEY.to_string(), mean));
    if let Some((train, test)) = setup.probe {
        let p = transfer_probe(encoder, train, test, &e.probe)?;
        out.push((PROBE_KEY.to_string(), p.accuracy));
    }
    Ok(out)
}

fn check_axis(values: &[usize], seeds: &[u64]) -> Result<(), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyAxis("value"));
    }
    if seeds.is_empty() {
        return Err(EvalError::EmptyAxis("seed"));
    }
    if let Some(&v) = values.iter().find(|&&v| v == 0) {
        return Err(EvalError::BadAxisValue(v));
    }
    Ok(())
}

fn echo(setup: &AblationSetup<'_>, values: &[usize], seeds: &[u64]) -> serde_json::Value {
    json!({
        "encoder": setup.encoder,
        "train": setup.train,
        "loss": setup.loss,
        "eval": setup.eval,
        "n_artists": setup.n_artists,
        "n_albums": setup.n_albums,
        "split_seed": setup.split_seed,
        "values": values,
        "seeds": seeds,
    })
}

/// Train one model per (n_negatives, seed) on the reference splits.
pub fn ablate_negatives(
    setup: &AblationSetup<'_>,
    values: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport, EvalError> {
    check_axis(values, seeds)?;
    let refs = setup.reference_splits()?;
    let data = TrainData {
        catalog: setup.catalog,
        store: setup.store,
        artist_split: Some(&refs.artist),
        album_split: Some(&refs.album),
    };
    let mut rows = Vec::new();
    for &v in values {
        for &seed in seeds {
            let (enc, mut tc) = setup.configs_for(seed);
            tc.n_negatives = v;
            let outcome = train(&enc, &tc, &setup.loss, data)?;
            for (key, accuracy) in score_model(&outcome.best_encoder(), setup, &refs)? {
                rows.push(ReportRow { axis: v, concept_or_dataset: key, accuracy, seed, n_albums: None });
            }
        }
    }
    Ok(MetricsReport { axis: "negatives".into(), config: echo(setup, values, seeds), rows })
}

/// Train on `n` artists and `2n` of their albums per count and seed.
pub fn ablate_scale(
    setup: &AblationSetup<'_>,
    artist_counts: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport, EvalError> {
    check_axis(artist_counts, seeds)?;
    let refs = setup.reference_splits()?;
    let mut rows = Vec::new();
    for &n in artist_counts {
        let artist_split = build_artist_split(setup.catalog, n, setup.split_seed)?;
        let sub = setup.catalog.restrict_to_artists(artist_split.groups.keys().map(String::as_str))?;
        let order: Vec<usize> =
            sub.tracks().iter().map(|t| setup.catalog.index_of(&t.track_id).expect("subset track")).collect();
        let sub_store = setup.store.reindex(&order);
        let n_albums = 2 * n;
        let album_split = build_album_split(&sub, n_albums, setup.split_seed)?;
        let data = TrainData {
            catalog: &sub,
            store: &sub_store,
            artist_split: Some(&artist_split),
            album_split: Some(&album_split),
        };
        for &seed in seeds {
            let (enc, tc) = setup.configs_for(seed);
            let outcome = train(&enc, &tc, &setup.loss, data)?;
            for (key, accuracy) in score_model(&outcome.best_encoder(), setup, &refs)? {
                rows.push(ReportRow { axis: n, concept_or_dataset: key, accuracy, seed, n_albums: Some(n_albums) });
            }
        }
    }
    Ok(MetricsReport { axis: "scale".into(), config: echo(setup, artist_counts, seeds), rows })
}
