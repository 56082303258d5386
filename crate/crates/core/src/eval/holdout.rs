//! Hold-out positive/negative prediction.
//!
//! Each trial embeds an anchor, one positive and N negatives drawn under the
//! hold-out regime, and is correct iff the positive is the unique most
//! similar candidate. Ties count as wrong.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::catalog::{CatalogIndex, Split};
use crate::features::FeatureStore;
use crate::loss::dot;
use crate::model::SegmentEncoder;
use crate::rng;
use crate::sampler::{Concept, Regime, Tuple, TupleSampler, TupleSpec};

pub const DEFAULT_TRIALS: usize = 2000;

/// True iff `pos` beats every negative strictly.
pub fn positive_wins(pos: f64, negatives: &[f64]) -> bool {
    negatives.iter().all(|&n| pos > n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutResult {
    pub concept: Concept,
    pub n_negatives: usize,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// One scored trial, kept so results can be re-checked offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutTrial {
    pub tuple: Tuple,
    /// Similarity of the anchor to the positive, then to each negative.
    pub similarities: Vec<f64>,
    pub correct: bool,
}

/// Hold-out tuples for `concept`, drawn from the `eval/holdout/{concept}`
/// substream of `seed`.
pub fn holdout_tuples(
    catalog: &CatalogIndex,
    split: &Split,
    concept: Concept,
    n_negatives: usize,
    segment_len: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Tuple>, EvalError> {
    let spec = TupleSpec::new(concept, Regime::Holdout, n_negatives, segment_len);
    let sampler = TupleSampler::new(catalog, split, spec)?;
    let mut r = rng::substream(seed, &format!("eval/holdout/{concept}"));
    Ok((0..trials).map(|_| sampler.sample(&mut r)).collect())
}

/// Score given tuples with `encoder`.
pub fn score_tuples(
    encoder: &(impl SegmentEncoder + ?Sized),
    store: &FeatureStore,
    tuples: Vec<Tuple>,
) -> Result<Vec<HoldoutTrial>, EvalError> {
    let len = encoder.input_shape().0;
    tuples
        .into_iter()
        .map(|tuple| {
            let embs = tuple
                .segments()
                .map(|r| Ok(encoder.encode(&store.segment(r, len)?)?))
                .collect::<Result<Vec<_>, EvalError>>()?;
            let similarities: Vec<f64> = embs[1..].iter().map(|e| dot(embs[0].as_slice(), e.as_slice())).collect();
            let correct = positive_wins(similarities[0], &similarities[1..]);
            Ok(HoldoutTrial { tuple, similarities, correct })
        })
        .collect()
}

/// Hold-out accuracy together with the logged trials.
#[allow(clippy::too_many_arguments)]
pub fn holdout_trials(
    encoder: &(impl SegmentEncoder + ?Sized),
    catalog: &CatalogIndex,
    store: &FeatureStore,
    split: &Split,
    concept: Concept,
    n_negatives: usize,
    trials: usize,
    seed: u64,
) -> Result<(HoldoutResult, Vec<HoldoutTrial>), EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let len = encoder.input_shape().0;
    let tuples = holdout_tuples(catalog, split, concept, n_negatives, len, trials, seed)?;
    let log = score_tuples(encoder, store, tuples)?;
    let correct = log.iter().filter(|t| t.correct).count();
    let result =
        HoldoutResult { concept, n_negatives, trials, correct, accuracy: correct as f64 / trials as f64, seed };
    Ok((result, log))
}

#[allow(clippy::too_many_arguments)]
pub fn holdout_accuracy(
    encoder: &(impl SegmentEncoder + ?Sized),
    catalog: &CatalogIndex,
    store: &FeatureStore,
    split: &Split,
    concept: Concept,
    n_negatives: usize,
    trials: usize,
    seed: u64,
) -> Result<HoldoutResult, EvalError> {
    Ok(holdout_trials(encoder, catalog, store, split, concept, n_negatives, trials, seed)?.0)
}
