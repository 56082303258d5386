//! Multi-negative max-margin loss over cosine similarity.
//!
//! For an anchor `a`, positive `p` and negatives `n_1..n_N`:
//!
//! ```text
//! L = Σ_i max(0, margin − a·p + a·n_i)
//! ```
//!
//! (or the mean over `i` with `reduce_negatives = "mean"`). The joint loss
//! averages `L` over each concept's batch and adds the concept means with
//! per-concept weights, all 1.0 by default. At an exact hinge kink the
//! subgradient is 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Embedding;
use crate::sampler::Concept;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("margin loss needs at least one negative")]
    EmptyNegatives,
    #[error("margin {0} outside [0, 2]")]
    BadMargin(f64),
    #[error("joint loss needs at least one concept batch")]
    NoBatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin_artist: f64,
    pub margin_album: f64,
    pub margin_track: f64,
    pub weight_artist: f64,
    pub weight_album: f64,
    pub weight_track: f64,
    pub reduce_negatives: NegativeReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_artist: 0.4,
            margin_album: 0.25,
            margin_track: 0.1,
            weight_artist: 1.0,
            weight_album: 1.0,
            weight_track: 1.0,
            reduce_negatives: NegativeReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn margin(&self, c: Concept) -> f64 {
        match c {
            Concept::Artist => self.margin_artist,
            Concept::Album => self.margin_album,
            Concept::Track => self.margin_track,
        }
    }

    pub fn weight(&self, c: Concept) -> f64 {
        match c {
            Concept::Artist => self.weight_artist,
            Concept::Album => self.weight_album,
            Concept::Track => self.weight_track,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for m in [self.margin_artist, self.margin_album, self.margin_track] {
            if !(0.0..=2.0).contains(&m) {
                return Err(LossError::BadMargin(m));
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of unit vectors, i.e. their dot product.
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    dot(a.as_slice(), b.as_slice())
}

pub fn margin_loss(
    anchor: &Embedding,
    positive: &Embedding,
    negatives: &[Embedding],
    margin: f64,
) -> Result<f64, LossError> {
    margin_loss_reduced(anchor, positive, negatives, margin, NegativeReduction::Sum)
}

pub fn margin_loss_reduced(
    anchor: &Embedding,
    positive: &Embedding,
    negatives: &[Embedding],
    margin: f64,
    reduce: NegativeReduction,
) -> Result<f64, LossError> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    let sp = similarity(anchor, positive);
    let total: f64 = negatives.iter().map(|n| (margin - sp + similarity(anchor, n)).max(0.0)).sum();
    Ok(match reduce {
        NegativeReduction::Sum => total,
        NegativeReduction::Mean => total / negatives.len() as f64,
    })
}

/// Loss and its gradient with respect to the raw slot vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Margin loss of one tuple with gradients, each scaled by `scale`.
///
/// Takes plain slices so it can run on encoder outputs without wrapping.
pub fn margin_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
    reduce: NegativeReduction,
    scale: f64,
) -> Result<TupleGrad, LossError> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    let d = anchor.len();
    let per = match reduce {
        NegativeReduction::Sum => 1.0,
        NegativeReduction::Mean => 1.0 / negatives.len() as f64,
    };
    let sp = dot(anchor, positive);
    let mut g = TupleGrad {
        loss: 0.0,
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negatives: vec![vec![0.0; d]; negatives.len()],
    };
    for (n, gn) in negatives.iter().zip(&mut g.negatives) {
        let h = margin - sp + dot(anchor, n);
        if h > 0.0 {
            g.loss += h * per;
            let w = per * scale;
            for k in 0..d {
                g.anchor[k] += w * (n[k] - positive[k]);
                g.positive[k] -= w * anchor[k];
                gn[k] = w * anchor[k];
            }
        }
    }
    g.loss *= scale;
    Ok(g)
}

/// Embeddings of one concept's tuples.
#[derive(Debug, Clone)]
pub struct ConceptEmbeddings {
    pub concept: Concept,
    pub tuples: Vec<EmbeddedTuple>,
}

#[derive(Debug, Clone)]
pub struct EmbeddedTuple {
    pub anchor: Embedding,
    pub positive: Embedding,
    pub negatives: Vec<Embedding>,
}

/// Mean margin loss of one concept batch.
pub fn concept_loss(batch: &ConceptEmbeddings, cfg: &LossConfig) -> Result<f64, LossError> {
    if batch.tuples.is_empty() {
        return Ok(0.0);
    }
    let margin = cfg.margin(batch.concept);
    let mut total = 0.0;
    for t in &batch.tuples {
        total += margin_loss_reduced(&t.anchor, &t.positive, &t.negatives, margin, cfg.reduce_negatives)?;
    }
    Ok(total / batch.tuples.len() as f64)
}

/// Weighted sum of per-concept batch means; absent concepts contribute nothing.
pub fn joint_loss(batches: &[ConceptEmbeddings], cfg: &LossConfig) -> Result<f64, LossError> {
    if batches.is_empty() {
        return Err(LossError::NoBatches);
    }
    batches.iter().map(|b| Ok(cfg.weight(b.concept) * concept_loss(b, cfg)?)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    fn random_unit(rng: &mut crate::rng::Rng, d: usize) -> Embedding {
        unit(&(0..d).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
    }

    #[test]
    fn similarity_identities() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let b = unit(&[0.0, 1.0, 0.0]);
        let neg = unit(&[-1.0, 0.0, 0.0]);
        assert_eq!(similarity(&a, &a), 1.0);
        assert_eq!(similarity(&a, &b), 0.0);
        assert_eq!(similarity(&a, &neg), -1.0);
    }

    #[test]
    fn satisfied_margin_is_zero() {
        let a = unit(&[1.0, 0.0]);
        let n = unit(&[0.0, 1.0]);
        assert_eq!(margin_loss(&a, &a, &[n], 0.4).unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_pay_full_margin() {
        let a = unit(&[0.3, 0.4, 0.5]);
        let loss = margin_loss(&a, &a, &vec![a.clone(); 4], 0.4).unwrap();
        assert!((loss - 1.6).abs() < 1e-12);
        let mean = margin_loss_reduced(&a, &a, &vec![a.clone(); 4], 0.4, NegativeReduction::Mean).unwrap();
        assert!((mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_error() {
        let a = unit(&[1.0]);
        assert_eq!(margin_loss(&a, &a, &[], 0.1), Err(LossError::EmptyNegatives));
        assert_eq!(joint_loss(&[], &LossConfig::default()), Err(LossError::NoBatches));
    }

    #[test]
    fn default_margins() {
        let c = LossConfig::default();
        assert_eq!((c.margin_artist, c.margin_album, c.margin_track), (0.4, 0.25, 0.1));
        assert!(c.validate().is_ok());
        assert!(LossConfig { margin_album: 2.5, ..c }.validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = substream(11, "loss-grad");
        let d = 6;
        let raw = |rng: &mut crate::rng::Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
        for _ in 0..20 {
            let a = raw(&mut rng);
            let p = raw(&mut rng);
            let ns: Vec<Vec<f64>> = (0..3).map(|_| raw(&mut rng)).collect();
            let f = |a: &[f64], p: &[f64], ns: &[Vec<f64>]| -> f64 {
                // Plain recomputation on unnormalised inputs.
                let sp = dot(a, p);
                ns.iter().map(|n| (0.5 - sp + dot(a, n)).max(0.0)).sum()
            };
            let refs: Vec<&[f64]> = ns.iter().map(|v| v.as_slice()).collect();
            let g = margin_loss_grad(&a, &p, &refs, 0.5, NegativeReduction::Sum, 1.0).unwrap();
            // Skip points near a kink.
            let sp = dot(&a, &p);
            if ns.iter().any(|n| (0.5 - sp + dot(&a, n)).abs() < 1e-3) {
                continue;
            }
            let h = 1e-6;
            for k in 0..d {
                let mut up = a.clone();
                up[k] += h;
                let mut dn = a.clone();
                dn[k] -= h;
                let fd = (f(&up, &p, &ns) - f(&dn, &p, &ns)) / (2.0 * h);
                assert!((fd - g.anchor[k]).abs() <= 1e-4 * fd.abs().max(1e-6));
                let mut up = ns.clone();
                up[1][k] += h;
                let mut dn = ns.clone();
                dn[1][k] -= h;
                let fd = (f(&a, &p, &up) - f(&a, &p, &dn)) / (2.0 * h);
                assert!((fd - g.negatives[1][k]).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn duplicating_a_batch_keeps_its_mean() {
        let mut rng = substream(5, "dup");
        let tuples: Vec<EmbeddedTuple> = (0..5)
            .map(|_| EmbeddedTuple {
                anchor: random_unit(&mut rng, 8),
                positive: random_unit(&mut rng, 8),
                negatives: (0..4).map(|_| random_unit(&mut rng, 8)).collect(),
            })
            .collect();
        let cfg = LossConfig::default();
        let once = ConceptEmbeddings { concept: Concept::Album, tuples: tuples.clone() };
        let twice =
            ConceptEmbeddings { concept: Concept::Album, tuples: tuples.iter().chain(&tuples).cloned().collect() };
        let a = concept_loss(&once, &cfg).unwrap();
        let b = concept_loss(&twice, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_monotone_in_negative_similarity(
            seed in any::<u64>(),
            n in 1usize..6,
            margin in 0.0f64..2.0,
            which in 0usize..6,
            step in 0.01f64..0.5,
        ) {
            let mut rng = substream(seed, "prop");
            let a = random_unit(&mut rng, 5);
            let p = random_unit(&mut rng, 5);
            let mut ns: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 5)).collect();
            let base = margin_loss(&a, &p, &ns, margin).unwrap();
            prop_assert!(base >= 0.0);
            let zero = ns.iter().all(|x| similarity(&a, x) <= similarity(&a, &p) - margin);
            prop_assert_eq!(base == 0.0, zero);
            // Move one negative toward the anchor: its similarity rises.
            let i = which % n;
            let moved: Vec<f64> = ns[i].as_slice().iter().zip(a.as_slice()).map(|(x, y)| x + step * y).collect();
            let moved = Embedding::normalize(moved).unwrap();
            prop_assume!(similarity(&a, &moved) >= similarity(&a, &ns[i]));
            ns[i] = moved;
            prop_assert!(margin_loss(&a, &p, &ns, margin).unwrap() >= base - 1e-12);
        }
    }
}
