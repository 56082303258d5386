use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::CatalogError;
use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::features::FeatureError;
use crate::model::ModelError;
use crate::sampler::SamplerError;
use crate::synth::SynthError;
use crate::trainer::TrainError;

/// Top-level error; every variant names the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("catalog: {0}")]
    Catalog(#[from] CatalogError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("trainer: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short module tag used in structured CLI errors.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Catalog(_) => "catalog",
            Error::Synth(_) => "synth",
            Error::Features(_) => "features",
            Error::Sampler(_) => "sampler",
            Error::Model(_) => "model",
            Error::Train(_) => "trainer",
            Error::Eval(_) => "eval",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
