//! Artist, album and track similarity learning over fixed-length feature
//! segments.
//!
//! The crate covers the whole experimental loop:
//!
//! * [`catalog`] indexes track metadata and builds artist- and album-basis
//!   train/validation/test splits.
//! * [`synth`] generates hierarchical synthetic catalogs whose ground truth is
//!   known, so every stage can be checked at desk scale.
//! * [`features`] reads `TFM1` feature files, cuts segments and computes
//!   log-mel spectrograms for real audio.
//! * [`sampler`] draws (anchor, positive, negatives) tuples per similarity
//!   concept under the train, validation and hold-out regimes.
//! * [`model`] is the shared convolutional encoder producing unit-norm
//!   embeddings, and [`loss`] the multi-negative margin loss over them.
//! * [`trainer`] runs joint or single-concept training with checkpointing.
//! * [`eval`] implements hold-out prediction, linear-probe transfer and the
//!   negative-count and scale ablations.
//! * [`config`] and [`cli`] drive everything from a TOML file.

pub mod catalog;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use catalog::{CatalogIndex, Split, SplitBasis, TrackRecord};
pub use error::{Error, Result};
pub use features::{FeatureMatrix, FeatureStore, Segment};
pub use loss::LossConfig;
pub use model::{Embedding, Encoder, EncoderConfig};
pub use sampler::{Concept, Regime, TupleSpec};
pub use trainer::{TrainConfig, TrainState, Trainer};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/catalog.md")]
    mod catalog {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
