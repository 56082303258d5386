//! Run configuration: one TOML file plus `--set section.key=value` overrides.
//!
//! Unknown keys are rejected with their full dotted path. Component seeds
//! that are not set explicitly are derived from the root `seed`, and the
//! resolved configuration (with every seed spelled out) is what commands
//! echo next to their outputs, so re-running from an echo reproduces a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::ablation::EvalConfig;
use crate::eval::probe::ProbeConfig;
use crate::loss::LossConfig;
use crate::model::EncoderConfig;
use crate::rng::child_seed;
use crate::sampler::Concept;
use crate::synth::HierarchyParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad override `{0}`: expected section.key=value")]
    BadOverride(String),
    #[error("`{0}` is not a table")]
    NotATable(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSection {
    /// Metadata CSV; empty means `<out>/synth/metadata.csv`.
    pub metadata: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub n_artists: usize,
    pub n_albums: usize,
    pub seed: u64,
    /// Split files; empty means `<out>/splits/{artist,album}_split.json`.
    pub artist: String,
    pub album: String,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { n_artists: 100, n_albums: 200, seed: 0, artist: String::new(), album: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub concepts: Vec<Concept>,
    pub n_negatives: usize,
    pub trials: usize,
    pub seed: u64,
    /// Also write every scored hold-out tuple.
    pub log_trials: bool,
    /// Probe CSVs; empty means `<out>/synth/probe_{train,test}.csv`.
    pub probe_train: String,
    pub probe_test: String,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        EvalSection {
            concepts: Concept::ALL.to_vec(),
            n_negatives: e.n_negatives,
            trials: e.trials,
            seed: e.seed,
            log_trials: false,
            probe_train: String::new(),
            probe_test: String::new(),
            probe: e.probe,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { n_negatives: self.n_negatives, trials: self.trials, seed: self.seed, probe: self.probe.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub negatives: Vec<usize>,
    pub artist_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { negatives: vec![1, 16], artist_counts: vec![20, 100], seeds: (0..5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub catalog: CatalogSection,
    pub synth: HierarchyParams,
    pub split: SplitSection,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

/// Seed fields filled from the root seed when not given, with the substream
/// name each is derived under.
const DERIVED_SEEDS: [(&str, &str); 6] = [
    ("synth.seed", "synth"),
    ("split.seed", "split"),
    ("encoder.seed", "encoder"),
    ("train.seed", "train"),
    ("eval.seed", "eval"),
    ("eval.probe.seed", "probe"),
];

fn lookup<'a>(table: &'a toml::Table, path: &str) -> Option<&'a toml::Value> {
    let mut parts = path.split('.');
    let mut v = table.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

fn first_leaf(prefix: &str, v: &toml::Value) -> String {
    match v.as_table().and_then(|t| t.iter().next()) {
        Some((k, inner)) => first_leaf(&format!("{prefix}.{k}"), inner),
        None => prefix.to_string(),
    }
}

/// First key of `user` (dotted) with no counterpart in `known`.
fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => return Some(first_leaf(&path, v)),
            Some(toml::Value::Table(kt)) => {
                if let toml::Value::Table(ut) = v {
                    if let Some(bad) = unknown_key(ut, kt, &path) {
                        return Some(bad);
                    }
                }
            }
            Some(_) => {}
        }
    }
    None
}

/// Parse the right-hand side of an override: a TOML value, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `section.key=value` to `table`, creating sections as needed.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| ConfigError::NotATable(parts[..=i].join(".")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Resolve from TOML text, overrides and an optional root seed.
    pub fn resolve(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| ConfigError::Invalid(format!("seed {s} exceeds i64")))?;
            table.insert("seed".into(), toml::Value::Integer(s));
        }
        let known = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("default config serializes to a table"),
        };
        if let Some(bad) = unknown_key(&table, &known, "") {
            return Err(ConfigError::UnknownKey(bad));
        }
        let mut cfg: RunConfig =
            table.clone().try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (path, name) in DERIVED_SEEDS {
            if lookup(&table, path).is_none() {
                // TOML integers are i64, so keep derived seeds in range
                *cfg.seed_slot(path) = child_seed(cfg.seed, name) & i64::MAX as u64;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => {
                std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?
            }
            None => String::new(),
        };
        RunConfig::resolve(&text, overrides, seed)
    }

    fn seed_slot(&mut self, path: &str) -> &mut u64 {
        match path {
            "synth.seed" => &mut self.synth.seed,
            "split.seed" => &mut self.split.seed,
            "encoder.seed" => &mut self.encoder.seed,
            "train.seed" => &mut self.train.seed,
            "eval.seed" => &mut self.eval.seed,
            "eval.probe.seed" => &mut self.eval.probe.seed,
            _ => unreachable!("unlisted seed path {path}"),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.synth.validate().map_err(|e| invalid(&e))?;
        self.encoder.realized_filters().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        if self.eval.n_negatives == 0 {
            return Err(ConfigError::Invalid("eval.n_negatives must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
