//! Tuple sampling for the three similarity concepts.
//!
//! Sources per regime, for artist and album concepts (groups are the split's
//! artists or albums):
//!
//! | regime     | anchor | positive (same group) | negatives (other groups) |
//! |------------|--------|-----------------------|--------------------------|
//! | train      | train  | train, other track    | train                    |
//! | validation | val    | train                 | val                      |
//! | holdout    | test   | val                   | test                     |
//!
//! The track concept runs on an artist-basis split. Every track of the
//! regime's set (train, val or test) is its own group: the positive is a
//! different window of the anchor's track and negatives come from other
//! tracks of the same set.
//!
//! Windows are uniform over valid start frames. Negatives in one tuple come
//! from pairwise-distinct groups unless `distinct_negatives` is off, in which
//! case groups are drawn with replacement (never the anchor's).

use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogIndex, Split, SplitBasis};
use crate::features::SegmentRef;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("{concept} concept needs a {expected}-basis split, got {got}")]
    BasisMismatch { concept: Concept, expected: SplitBasis, got: SplitBasis },
    #[error("unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("split references track `{0}` missing from the catalog")]
    UnknownTrack(String),
    #[error("n_negatives must be >= 1")]
    NoNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Artist,
    Album,
    Track,
}

impl Concept {
    pub const ALL: [Concept; 3] = [Concept::Artist, Concept::Album, Concept::Track];

    pub fn name(self) -> &'static str {
        match self {
            Concept::Artist => "artist",
            Concept::Album => "album",
            Concept::Track => "track",
        }
    }

    /// Split basis the concept samples from.
    pub fn basis(self) -> SplitBasis {
        match self {
            Concept::Artist | Concept::Track => SplitBasis::Artist,
            Concept::Album => SplitBasis::Album,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Train,
    Validation,
    Holdout,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Train => "train",
            Regime::Validation => "validation",
            Regime::Holdout => "holdout",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleSpec {
    pub concept: Concept,
    pub n_negatives: usize,
    pub regime: Regime,
    pub segment_len: usize,
    pub distinct_negatives: bool,
}

impl TupleSpec {
    pub fn new(concept: Concept, regime: Regime, n_negatives: usize, segment_len: usize) -> Self {
        TupleSpec { concept, n_negatives, regime, segment_len, distinct_negatives: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuple {
    pub anchor: SegmentRef,
    pub positive: SegmentRef,
    pub negatives: Vec<SegmentRef>,
}

impl Tuple {
    /// Anchor, positive, then negatives.
    pub fn segments(&self) -> impl Iterator<Item = SegmentRef> + '_ {
        [self.anchor, self.positive].into_iter().chain(self.negatives.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleBatch {
    pub concept: Concept,
    pub tuples: Vec<Tuple>,
}

struct Group {
    anchors: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

/// Precomputed sampling pools for one (split, spec) pair.
pub struct TupleSampler<'a> {
    catalog: &'a CatalogIndex,
    spec: TupleSpec,
    groups: Vec<Group>,
    /// (group, track) for every eligible anchor.
    anchors: Vec<(usize, usize)>,
}

fn resolve(catalog: &CatalogIndex, ids: &[String]) -> Result<Vec<usize>, SamplerError> {
    ids.iter().map(|id| catalog.index_of(id).ok_or_else(|| SamplerError::UnknownTrack(id.clone()))).collect()
}

impl<'a> TupleSampler<'a> {
    pub fn new(catalog: &'a CatalogIndex, split: &Split, spec: TupleSpec) -> Result<Self, SamplerError> {
        if spec.n_negatives == 0 {
            return Err(SamplerError::NoNegatives);
        }
        let expected = spec.concept.basis();
        if split.basis != expected {
            return Err(SamplerError::BasisMismatch { concept: spec.concept, expected, got: split.basis });
        }
        let mut groups = Vec::new();
        if spec.concept == Concept::Track {
            for g in split.groups.values() {
                let set = match spec.regime {
                    Regime::Train => &g.train,
                    Regime::Validation => &g.val,
                    Regime::Holdout => &g.test,
                };
                for t in resolve(catalog, set)? {
                    groups.push(Group { anchors: vec![t], positives: vec![t], negatives: vec![t] });
                }
            }
        } else {
            for g in split.groups.values() {
                let (anchors, positives, negatives) = match spec.regime {
                    Regime::Train => (&g.train, &g.train, &g.train),
                    Regime::Validation => (&g.val, &g.train, &g.val),
                    Regime::Holdout => (&g.test, &g.val, &g.test),
                };
                groups.push(Group {
                    anchors: resolve(catalog, anchors)?,
                    positives: resolve(catalog, positives)?,
                    negatives: resolve(catalog, negatives)?,
                });
            }
        }

        let what = || format!("{} concept, {} regime", spec.concept, spec.regime);
        let frames = |t: usize| catalog.track(t).n_frames as usize;
        for g in &groups {
            for &t in g.anchors.iter().chain(&g.positives).chain(&g.negatives) {
                if frames(t) < spec.segment_len {
                    return Err(SamplerError::Unsatisfiable(format!(
                        "{}: track {} has {} frames, shorter than segment_len {}",
                        what(),
                        catalog.track(t).track_id,
                        frames(t),
                        spec.segment_len
                    )));
                }
            }
        }
        if spec.concept == Concept::Track {
            if let Some(g) = groups.iter().find(|g| frames(g.anchors[0]) <= spec.segment_len) {
                return Err(SamplerError::Unsatisfiable(format!(
                    "{}: track {} has no second window of {} frames for the positive",
                    what(),
                    catalog.track(g.anchors[0]).track_id,
                    spec.segment_len
                )));
            }
        } else if spec.regime == Regime::Train {
            if groups.iter().any(|g| g.anchors.len() < 2) {
                return Err(SamplerError::Unsatisfiable(format!(
                    "{}: every group needs two training tracks for a distinct positive",
                    what()
                )));
            }
        } else if groups.iter().any(|g| g.positives.is_empty() || g.anchors.is_empty()) {
            return Err(SamplerError::Unsatisfiable(format!("{}: a group has an empty pool", what())));
        }
        let other = groups.len().saturating_sub(1);
        if other == 0 || (spec.distinct_negatives && other < spec.n_negatives) {
            return Err(SamplerError::Unsatisfiable(format!(
                "{}: {} negatives from distinct non-anchor groups, but only {} other groups exist",
                what(),
                spec.n_negatives,
                other
            )));
        }
        if groups.iter().any(|g| g.negatives.is_empty()) {
            return Err(SamplerError::Unsatisfiable(format!("{}: a group has no negative candidates", what())));
        }
        let anchors = groups.iter().enumerate().flat_map(|(gi, g)| g.anchors.iter().map(move |&t| (gi, t))).collect();
        Ok(TupleSampler { catalog, spec, groups, anchors })
    }

    pub fn spec(&self) -> &TupleSpec {
        &self.spec
    }

    fn window(&self, track: usize, rng: &mut Rng) -> SegmentRef {
        let n = self.catalog.track(track).n_frames as usize;
        SegmentRef { track, start: rng.random_range(0..=n - self.spec.segment_len) }
    }

    pub fn sample(&self, rng: &mut Rng) -> Tuple {
        let (gi, anchor_track) = self.anchors[rng.random_range(0..self.anchors.len())];
        let anchor = self.window(anchor_track, rng);
        let group = &self.groups[gi];

        let positive = if self.spec.concept == Concept::Track {
            let n_starts = self.catalog.track(anchor_track).n_frames as usize - self.spec.segment_len + 1;
            let mut start = rng.random_range(0..n_starts - 1);
            if start >= anchor.start {
                start += 1;
            }
            SegmentRef { track: anchor_track, start }
        } else if self.spec.regime == Regime::Train {
            let pool = &group.positives;
            let mut k = rng.random_range(0..pool.len() - 1);
            let anchor_pos = pool.iter().position(|&t| t == anchor_track).expect("anchor in pool");
            if k >= anchor_pos {
                k += 1;
            }
            self.window(pool[k], rng)
        } else {
            let pool = &group.positives;
            self.window(pool[rng.random_range(0..pool.len())], rng)
        };

        let n_other = self.groups.len() - 1;
        let pick_group = |k: usize| if k >= gi { k + 1 } else { k };
        let chosen: Vec<usize> = if self.spec.distinct_negatives {
            index::sample(rng, n_other, self.spec.n_negatives).into_iter().map(pick_group).collect()
        } else {
            (0..self.spec.n_negatives).map(|_| pick_group(rng.random_range(0..n_other))).collect()
        };
        let negatives = chosen
            .into_iter()
            .map(|h| {
                let pool = &self.groups[h].negatives;
                let t = pool[rng.random_range(0..pool.len())];
                self.window(t, rng)
            })
            .collect();
        Tuple { anchor, positive, negatives }
    }

    pub fn sample_batch(&self, rng: &mut Rng, size: usize) -> TupleBatch {
        TupleBatch { concept: self.spec.concept, tuples: (0..size).map(|_| self.sample(rng)).collect() }
    }
}

/// Draw a single tuple; builds the pools on every call.
pub fn sample_tuple(
    catalog: &CatalogIndex,
    split: &Split,
    spec: TupleSpec,
    rng: &mut Rng,
) -> Result<Tuple, SamplerError> {
    Ok(TupleSampler::new(catalog, split, spec)?.sample(rng))
}

/// `count` tuples from the named seed, chunked into batches of `batch_size`
/// (the last batch may be short).
pub fn tuple_stream(
    catalog: &CatalogIndex,
    split: &Split,
    spec: TupleSpec,
    seed: u64,
    count: usize,
    batch_size: usize,
) -> Result<Vec<TupleBatch>, SamplerError> {
    let sampler = TupleSampler::new(catalog, split, spec)?;
    let mut rng = crate::rng::substream(seed, &format!("sampler/{}/{}", spec.concept, spec.regime));
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(count.div_ceil(batch_size));
    let mut left = count;
    while left > 0 {
        let n = left.min(batch_size);
        out.push(sampler.sample_batch(&mut rng, n));
        left -= n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_album_split, build_artist_split, TrackRecord};
    use crate::rng::substream;

    fn catalog(n_artists: usize, albums: usize, tracks: usize, n_frames: u32) -> CatalogIndex {
        let mut v = Vec::new();
        for a in 0..n_artists {
            for b in 0..albums {
                for t in 0..tracks {
                    v.push(TrackRecord {
                        track_id: format!("t{a:02}{b}{t:02}"),
                        artist_id: format!("ar{a:02}"),
                        album_id: format!("al{a:02}{b}"),
                        feature_ref: String::new(),
                        n_frames,
                    });
                }
            }
        }
        CatalogIndex::from_records(v, "").unwrap()
    }

    #[test]
    fn artist_train_negatives_are_distinct_other_artists() {
        let cat = catalog(8, 2, 10, 20);
        let split = build_artist_split(&cat, 8, 1).unwrap();
        let spec = TupleSpec::new(Concept::Artist, Regime::Train, 4, 5);
        let sampler = TupleSampler::new(&cat, &split, spec).unwrap();
        let mut rng = substream(0, "t");
        for _ in 0..200 {
            let t = sampler.sample(&mut rng);
            let artist = |r: SegmentRef| cat.track(r.track).artist_id.clone();
            assert_eq!(t.negatives.len(), 4);
            assert_eq!(artist(t.positive), artist(t.anchor));
            assert_ne!(t.positive.track, t.anchor.track);
            let mut seen: Vec<String> = t.negatives.iter().map(|&n| artist(n)).collect();
            assert!(seen.iter().all(|a| *a != artist(t.anchor)));
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 4);
        }
    }

    #[test]
    fn track_positive_is_another_window() {
        let cat = catalog(4, 1, 20, 12);
        let split = build_artist_split(&cat, 4, 2).unwrap();
        for regime in [Regime::Train, Regime::Validation, Regime::Holdout] {
            let sampler = TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Track, regime, 3, 6)).unwrap();
            let mut rng = substream(1, "t");
            for _ in 0..300 {
                let t = sampler.sample(&mut rng);
                assert_eq!(t.positive.track, t.anchor.track);
                assert_ne!(t.positive.start, t.anchor.start);
                assert!(t.positive.start + 6 <= 12);
                assert!(t.negatives.iter().all(|n| n.track != t.anchor.track));
            }
        }
    }

    #[test]
    fn single_artist_is_unsatisfiable() {
        let cat = catalog(1, 1, 20, 20);
        let split = build_artist_split(&cat, 1, 0).unwrap();
        let err = TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Artist, Regime::Train, 1, 4)).err().unwrap();
        assert!(matches!(err, SamplerError::Unsatisfiable(_)));
    }

    #[test]
    fn pigeonhole_on_negative_count() {
        let cat = catalog(20, 1, 20, 20);
        let split = build_artist_split(&cat, 20, 0).unwrap();
        assert!(TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Artist, Regime::Train, 16, 4)).is_ok());
        assert!(TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Artist, Regime::Train, 19, 4)).is_ok());
        let err = TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Artist, Regime::Train, 25, 4)).err().unwrap();
        assert!(err.to_string().contains("25 negatives"), "{err}");
        let mut loose = TupleSpec::new(Concept::Artist, Regime::Train, 25, 4);
        loose.distinct_negatives = false;
        assert!(TupleSampler::new(&cat, &split, loose).is_ok());
    }

    #[test]
    fn basis_must_match_concept() {
        let cat = catalog(4, 2, 10, 20);
        let album = build_album_split(&cat, 8, 0).unwrap();
        let err = TupleSampler::new(&cat, &album, TupleSpec::new(Concept::Track, Regime::Train, 2, 4)).err().unwrap();
        assert!(matches!(err, SamplerError::BasisMismatch { .. }));
    }

    #[test]
    fn track_needs_room_for_two_windows() {
        let cat = catalog(4, 1, 20, 6);
        let split = build_artist_split(&cat, 4, 0).unwrap();
        assert!(TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Track, Regime::Train, 2, 6)).is_err());
        assert!(TupleSampler::new(&cat, &split, TupleSpec::new(Concept::Artist, Regime::Train, 2, 6)).is_ok());
    }

    #[test]
    fn stream_is_deterministic_and_batched() {
        let cat = catalog(6, 2, 10, 20);
        let split = build_artist_split(&cat, 6, 0).unwrap();
        let spec = TupleSpec::new(Concept::Artist, Regime::Validation, 4, 5);
        let a = tuple_stream(&cat, &split, spec, 7, 1000, 64).unwrap();
        let b = tuple_stream(&cat, &split, spec, 7, 1000, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.last().unwrap().tuples.len(), 1000 - 15 * 64);
        let c = tuple_stream(&cat, &split, spec, 8, 1000, 64).unwrap();
        assert_ne!(a, c);
    }
}
