//! Hold-out prediction, linear-probe transfer and the ablation harnesses.

pub mod ablation;
pub mod holdout;
pub mod probe;

use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::CatalogError;
use crate::features::FeatureError;
use crate::model::ModelError;
use crate::sampler::SamplerError;
use crate::trainer::TrainError;

pub use ablation::{ablate_negatives, ablate_scale, AblationSetup, MetricsReport, ReportRow};
pub use holdout::{holdout_accuracy, holdout_trials, HoldoutResult, HoldoutTrial};
pub use probe::{transfer_probe, ProbeConfig, ProbeDataset, ProbeResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read probe file {path}: {message}")]
    ProbeFile { path: PathBuf, message: String },
    #[error("probe set needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("class {0:?} has no training items")]
    ClassMissingFromTrain(String),
    #[error("item {0} appears in both probe train and test sets")]
    OverlappingSets(String),
    #[error("probe set is empty")]
    EmptyProbeSet,
    #[error("{what}: expected {expected} items, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("ablation needs at least one {0}")]
    EmptyAxis(&'static str),
    #[error("ablation value {0} must be >= 1")]
    BadAxisValue(usize),
    #[error("hold-out run needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
