//! Synthetic hierarchical catalogs with known artist/album/track structure.
//!
//! Artists are grouped into `n_genres` genres of `genre_modes` styles each.
//! Every style draws a latent centroid with scale `sigma_genre`, so a genre
//! with several styles is a union of separate clusters and not linearly
//! separable from the others. Each artist adds an offset of scale
//! `sigma_artist` to its style centroid, albums add `sigma_album` and tracks
//! `sigma_track`. A frame is a fixed
//! random linear readout of `track centroid + sigma_frame · noise` into
//! `n_bins` dimensions.
//!
//! With `level_subspaces` the artist, album and track offsets live in three
//! disjoint blocks of the latent space (frame noise covers all of it), so
//! each similarity concept has directions of its own that an encoder can
//! learn to keep or discard.
//!
//! With `max_shift > 0` every track is also transposed: its frames are
//! rolled circularly along the bin axis by a per-track offset drawn from
//! `0..=max_shift`, a nuisance that frame-mean statistics cannot undo.
//!
//! Besides the catalog, every artist gets a few held-aside "probe" tracks on
//! fresh albums, labelled with the artist's genre. These never appear in the
//! catalog and back the transfer probe.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{self, CatalogError, CatalogIndex, TrackRecord};
use crate::eval::probe::{write_probe_csv, ProbeDataset, ProbeItem};
use crate::features::{write_features, FeatureError, FeatureMatrix, FeatureStore};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyParams {
    pub n_artists: usize,
    pub albums_per_artist: usize,
    pub tracks_per_album: usize,
    pub n_frames: usize,
    pub n_bins: usize,
    pub latent_dim: usize,
    /// Spread of genre centroids; artists of a genre cluster around them.
    pub sigma_genre: f64,
    /// Style clusters per genre.
    pub genre_modes: usize,
    pub sigma_artist: f64,
    pub sigma_album: f64,
    pub sigma_track: f64,
    pub sigma_frame: f64,
    pub level_subspaces: bool,
    /// Largest per-track circular bin shift.
    pub max_shift: usize,
    pub n_genres: usize,
    pub probe_tracks_per_artist: usize,
    pub seed: u64,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        HierarchyParams {
            n_artists: 100,
            albums_per_artist: 4,
            tracks_per_album: 10,
            n_frames: 32,
            n_bins: 12,
            latent_dim: 12,
            // Wide album and track spreads make the levels compete: a model
            // trained for one concept throws away signal the others need.
            sigma_genre: 5.0,
            genre_modes: 4,
            sigma_artist: 1.0,
            sigma_album: 2.0,
            sigma_track: 2.5,
            sigma_frame: 1.0,
            level_subspaces: true,
            max_shift: 0,
            n_genres: 5,
            probe_tracks_per_artist: 6,
            seed: 0,
        }
    }
}

impl HierarchyParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("n_artists", self.n_artists),
            ("albums_per_artist", self.albums_per_artist),
            ("tracks_per_album", self.tracks_per_album),
            ("n_frames", self.n_frames),
            ("n_bins", self.n_bins),
            ("latent_dim", self.latent_dim),
            ("genre_modes", self.genre_modes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::InvalidParams(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in self.sigmas().into_iter().chain([("sigma_genre", self.sigma_genre)]) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidParams(format!("{name} must be a finite value >= 0")));
            }
        }
        if self.level_subspaces && self.latent_dim < 3 {
            return Err(SynthError::InvalidParams("level_subspaces needs latent_dim >= 3".into()));
        }
        if self.max_shift >= self.n_bins {
            return Err(SynthError::InvalidParams("max_shift must be < n_bins".into()));
        }
        if self.probe_tracks_per_artist > 0 && self.n_genres == 0 {
            return Err(SynthError::InvalidParams("n_genres must be >= 1".into()));
        }
        Ok(())
    }

    fn sigmas(&self) -> [(&'static str, f64); 4] {
        [
            ("sigma_artist", self.sigma_artist),
            ("sigma_album", self.sigma_album),
            ("sigma_track", self.sigma_track),
            ("sigma_frame", self.sigma_frame),
        ]
    }

    /// Non-fatal notes, e.g. a dispersion ordering that breaks the hierarchy.
    ///
    /// Only checked when all levels share one latent space; with
    /// `level_subspaces` the offsets are orthogonal and any ordering separates.
    pub fn warnings(&self) -> Vec<String> {
        if self.level_subspaces {
            return Vec::new();
        }
        let s = self.sigmas();
        s.windows(2)
            .filter(|w| w[0].1 <= w[1].1)
            .map(|w| format!("{} ({}) <= {} ({}): hierarchy levels overlap", w[0].0, w[0].1, w[1].0, w[1].1))
            .collect()
    }

    pub fn n_tracks(&self) -> usize {
        self.n_artists * self.albums_per_artist * self.tracks_per_album
    }

    /// Latent index ranges carrying artist, album and track offsets.
    fn level_blocks(&self) -> [std::ops::Range<usize>; 3] {
        let d = self.latent_dim;
        if self.level_subspaces {
            [0..d / 3, d / 3..2 * d / 3, 2 * d / 3..d]
        } else {
            [0..d, 0..d, 0..d]
        }
    }
}

/// A generated catalog, its features, and the held-aside probe sets.
#[derive(Debug, Clone)]
pub struct SynthCatalog {
    pub params: HierarchyParams,
    pub catalog: CatalogIndex,
    pub store: FeatureStore,
    /// artist_id → genre label.
    pub genres: BTreeMap<String, String>,
    pub probe_train: ProbeDataset,
    pub probe_test: ProbeDataset,
    pub probe_train_features: Vec<FeatureMatrix>,
    pub probe_test_features: Vec<FeatureMatrix>,
}

fn add_noise(v: &mut [f64], range: std::ops::Range<usize>, sigma: f64, rng: &mut Rng) {
    for x in &mut v[range] {
        let z: f64 = StandardNormal.sample(rng);
        *x += sigma * z;
    }
}

struct Readout {
    n_bins: usize,
    latent: usize,
    w: Vec<f64>,
}

impl Readout {
    fn frames(&self, centroid: &[f64], n_frames: usize, sigma: f64, max_shift: usize, rng: &mut Rng) -> FeatureMatrix {
        let shift = if max_shift > 0 { rng.random_range(0..=max_shift) } else { 0 };
        let mut values = Vec::with_capacity(n_frames * self.n_bins);
        let mut z = vec![0.0; self.latent];
        for _ in 0..n_frames {
            for (zi, &c) in z.iter_mut().zip(centroid) {
                let e: f64 = StandardNormal.sample(rng);
                *zi = c + sigma * e;
            }
            for b in 0..self.n_bins {
                let src = (b + self.n_bins - shift) % self.n_bins;
                let row = &self.w[src * self.latent..(src + 1) * self.latent];
                let x: f64 = row.iter().zip(&z).map(|(w, z)| w * z).sum();
                values.push(x as f32);
            }
        }
        FeatureMatrix::new(n_frames, self.n_bins, values).expect("nonzero shape")
    }
}

pub fn artist_id(a: usize) -> String {
    format!("ar{a:04}")
}

/// Build the catalog and features in memory. Deterministic given `params`.
pub fn generate(params: &HierarchyParams) -> Result<SynthCatalog, SynthError> {
    params.validate()?;
    let p = params;
    let mut readout_rng = rng::substream(p.seed, "synth/readout");
    let scale = 1.0 / (p.latent_dim as f64).sqrt();
    let w = (0..p.n_bins * p.latent_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut readout_rng);
            z * scale
        })
        .collect();
    let readout = Readout { n_bins: p.n_bins, latent: p.latent_dim, w };
    let [artist_block, album_block, track_block] = p.level_blocks();

    let mut rng = rng::substream(p.seed, "synth/hierarchy");
    let mut probe_rng = rng::substream(p.seed, "synth/probe");
    let mut records = Vec::with_capacity(p.n_tracks());
    let mut mats = Vec::with_capacity(p.n_tracks());
    let mut artist_centroids = Vec::with_capacity(p.n_artists);
    // Genre membership is a seeded shuffle dealt round-robin, so genre
    // sizes differ by at most one.
    let mut genre_rng = rng::substream(p.seed, "synth/genres");
    let mut order: Vec<usize> = (0..p.n_artists).collect();
    order.shuffle(&mut genre_rng);
    // Ranks are dealt over (genre, style) pairs, style-major, so styles are
    // balanced too.
    let n_genres = p.n_genres.max(1);
    let n_styles = n_genres * p.genre_modes.max(1);
    let mut genre_of = vec![0; p.n_artists];
    let mut style_of = vec![0; p.n_artists];
    for (rank, &a) in order.iter().enumerate() {
        style_of[a] = rank % n_styles;
        genre_of[a] = style_of[a] % n_genres;
    }
    let style_centroids: Vec<Vec<f64>> = (0..n_styles)
        .map(|_| {
            let mut c = vec![0.0; p.latent_dim];
            add_noise(&mut c, artist_block.clone(), p.sigma_genre, &mut genre_rng);
            c
        })
        .collect();
    let mut genres = BTreeMap::new();
    if p.n_genres > 0 {
        for (a, &g) in genre_of.iter().enumerate() {
            genres.insert(artist_id(a), format!("g{g}"));
        }
    }

    for a in 0..p.n_artists {
        let mut ca = style_centroids[style_of[a]].clone();
        add_noise(&mut ca, artist_block.clone(), p.sigma_artist, &mut rng);
        for b in 0..p.albums_per_artist {
            let album = a * p.albums_per_artist + b;
            let mut cb = ca.clone();
            add_noise(&mut cb, album_block.clone(), p.sigma_album, &mut rng);
            for t in 0..p.tracks_per_album {
                let track = album * p.tracks_per_album + t;
                let mut ct = cb.clone();
                add_noise(&mut ct, track_block.clone(), p.sigma_track, &mut rng);
                mats.push(readout.frames(&ct, p.n_frames, p.sigma_frame, p.max_shift, &mut rng));
                let track_id = format!("tr{track:06}");
                records.push(TrackRecord {
                    feature_ref: format!("features/{track_id}.tfm"),
                    track_id,
                    artist_id: artist_id(a),
                    album_id: format!("al{album:05}"),
                    n_frames: p.n_frames as u32,
                });
            }
        }
        artist_centroids.push(ca);
    }

    let mut probe_train = Vec::new();
    let mut probe_test = Vec::new();
    let mut probe_train_features = Vec::new();
    let mut probe_test_features = Vec::new();
    let n_probe_train = p.probe_tracks_per_artist.div_ceil(2);
    for (a, ca) in artist_centroids.iter().enumerate() {
        for k in 0..p.probe_tracks_per_artist {
            let mut ct = ca.clone();
            add_noise(&mut ct, album_block.clone(), p.sigma_album, &mut probe_rng);
            add_noise(&mut ct, track_block.clone(), p.sigma_track, &mut probe_rng);
            let m = readout.frames(&ct, p.n_frames, p.sigma_frame, p.max_shift, &mut probe_rng);
            let id = a * p.probe_tracks_per_artist + k;
            let item = ProbeItem { feature_ref: format!("probe/pr{id:06}.tfm"), label: genres[&artist_id(a)].clone() };
            if k < n_probe_train {
                probe_train.push(item);
                probe_train_features.push(m);
            } else {
                probe_test.push(item);
                probe_test_features.push(m);
            }
        }
    }

    // from_records sorts by track_id, which matches generation order here.
    let catalog = CatalogIndex::from_records(records, "")?;
    Ok(SynthCatalog {
        params: p.clone(),
        catalog,
        store: FeatureStore::from_matrices(mats),
        genres,
        probe_train: ProbeDataset::from_items(probe_train),
        probe_test: ProbeDataset::from_items(probe_test),
        probe_train_features,
        probe_test_features,
    })
}

impl SynthCatalog {
    /// Write `metadata.csv`, `features/*.tfm`, `probe/*.tfm`,
    /// `probe_train.csv` and `probe_test.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let mkdir = |d: PathBuf| fs::create_dir_all(&d).map_err(|source| SynthError::Write { path: d, source });
        mkdir(dir.join("features"))?;
        mkdir(dir.join("probe"))?;
        for (i, rec) in self.catalog.tracks().iter().enumerate() {
            write_features(&dir.join(&rec.feature_ref), self.store.get(i))?;
        }
        let meta = dir.join("metadata.csv");
        catalog::write_catalog(&meta, self.catalog.tracks())
            .map_err(|source| SynthError::Write { path: meta, source })?;
        for (set, feats, name) in [
            (&self.probe_train, &self.probe_train_features, "probe_train.csv"),
            (&self.probe_test, &self.probe_test_features, "probe_test.csv"),
        ] {
            for (item, m) in set.items.iter().zip(feats) {
                write_features(&dir.join(&item.feature_ref), m)?;
            }
            let path = dir.join(name);
            write_probe_csv(&path, set).map_err(|source| SynthError::Write { path, source })?;
        }
        Ok(())
    }
}

/// Generate and write to `dir`; the returned catalog resolves features there.
pub fn generate_catalog(params: &HierarchyParams, dir: &Path) -> Result<SynthCatalog, SynthError> {
    let mut synth = generate(params)?;
    synth.write(dir)?;
    synth.catalog = CatalogIndex::from_records(synth.catalog.tracks().to_vec(), dir)?;
    Ok(synth)
}

/// Mean pairwise Euclidean frame distances at each hierarchy level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub within_track: f64,
    pub within_album: f64,
    pub within_artist: f64,
    pub between_artist: f64,
}

/// Exhaustive pairwise distances over the first `frames_per_track` frames
/// of every track (all frames when `None`).
///
/// Pairs are bucketed by the finest level they share: same track, same album
/// (different track), same artist (different album), or different artists.
pub fn hierarchy_separation(
    catalog: &CatalogIndex,
    store: &FeatureStore,
    frames_per_track: Option<usize>,
) -> SeparationStats {
    struct Frame<'a> {
        track: usize,
        values: &'a [f32],
    }
    let mut frames = Vec::new();
    for i in 0..catalog.len() {
        let m = store.get(i);
        let n = frames_per_track.map_or(m.n_frames(), |k| k.min(m.n_frames()));
        for t in 0..n {
            frames.push(Frame { track: i, values: m.frame(t) });
        }
    }
    let mut sums = [0.0f64; 4];
    let mut counts = [0u64; 4];
    for (i, a) in frames.iter().enumerate() {
        let ra = catalog.track(a.track);
        for b in &frames[i + 1..] {
            let rb = catalog.track(b.track);
            let level = if a.track == b.track {
                0
            } else if ra.album_id == rb.album_id {
                1
            } else if ra.artist_id == rb.artist_id {
                2
            } else {
                3
            };
            let d2: f64 = a
                .values
                .iter()
                .zip(b.values)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            sums[level] += d2.sqrt();
            counts[level] += 1;
        }
    }
    let mean = |k: usize| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 };
    SeparationStats { within_track: mean(0), within_album: mean(1), within_artist: mean(2), between_artist: mean(3) }
}
