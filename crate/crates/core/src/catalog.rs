//! Track metadata, the artist/album hierarchy index, and group-based splits.
//!
//! A split partitions a fixed number of songs per group into train,
//! validation and test: 16/2/2 out of 20 songs per artist, or 8/1/1 out of
//! 10 songs per album.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read metadata {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("missing header column `{0}`")]
    MissingColumn(String),
    #[error("duplicate track_id `{0}`")]
    DuplicateTrack(String),
    #[error("album `{album_id}` is mapped to two artists (`{first}` and `{second}`)")]
    AlbumArtistConflict { album_id: String, first: String, second: String },
    #[error("{basis} split needs {requested} groups with >= {needed} tracks, only {available} qualify (shortfall {shortfall})")]
    Shortfall { basis: SplitBasis, requested: usize, available: usize, shortfall: usize, needed: usize },
    #[error("requested 0 groups")]
    EmptyRequest,
}

/// One row of the metadata file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    pub artist_id: String,
    pub album_id: String,
    pub feature_ref: String,
    pub n_frames: u32,
}

/// A record refused at load time because it is shorter than a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRecord {
    pub line: u64,
    pub track_id: String,
    pub n_frames: u32,
    pub segment_len: u32,
}

/// Index of tracks by artist and album.
///
/// Tracks are addressed by their position in [`CatalogIndex::tracks`];
/// buckets hold those positions in track-id order.
#[derive(Debug, Clone)]
pub struct CatalogIndex {
    root: PathBuf,
    tracks: Vec<TrackRecord>,
    by_id: HashMap<String, usize>,
    by_artist: BTreeMap<String, Vec<usize>>,
    by_album: BTreeMap<String, Vec<usize>>,
}

impl CatalogIndex {
    /// Build an index, checking id uniqueness and the album→artist mapping.
    /// Relative `feature_ref`s resolve against `root`.
    pub fn from_records(records: Vec<TrackRecord>, root: impl Into<PathBuf>) -> Result<Self, CatalogError> {
        let mut records = records;
        records.sort_by(|a, b| a.track_id.cmp(&b.track_id));
        let mut by_id = HashMap::with_capacity(records.len());
        let mut album_artist: HashMap<&str, &str> = HashMap::new();
        let mut by_artist: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_album: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, rec) in records.iter().enumerate() {
            if by_id.insert(rec.track_id.clone(), idx).is_some() {
                return Err(CatalogError::DuplicateTrack(rec.track_id.clone()));
            }
            match album_artist.get(rec.album_id.as_str()) {
                Some(&artist) if artist != rec.artist_id => {
                    return Err(CatalogError::AlbumArtistConflict {
                        album_id: rec.album_id.clone(),
                        first: artist.to_string(),
                        second: rec.artist_id.clone(),
                    });
                }
                Some(_) => {}
                None => {
                    album_artist.insert(&rec.album_id, &rec.artist_id);
                }
            }
            by_artist.entry(rec.artist_id.clone()).or_default().push(idx);
            by_album.entry(rec.album_id.clone()).or_default().push(idx);
        }
        Ok(CatalogIndex { root: root.into(), tracks: records, by_id, by_artist, by_album })
    }

    pub fn tracks(&self) -> &[TrackRecord] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track(&self, idx: usize) -> &TrackRecord {
        &self.tracks[idx]
    }

    pub fn index_of(&self, track_id: &str) -> Option<usize> {
        self.by_id.get(track_id).copied()
    }

    pub fn get(&self, track_id: &str) -> Option<&TrackRecord> {
        self.index_of(track_id).map(|i| &self.tracks[i])
    }

    pub fn by_artist(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_artist
    }

    pub fn by_album(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_album
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn feature_path(&self, idx: usize) -> PathBuf {
        let r = Path::new(&self.tracks[idx].feature_ref);
        if r.is_absolute() {
            r.to_path_buf()
        } else {
            self.root.join(r)
        }
    }

    /// Group id of a track under the given basis.
    pub fn group_of(&self, idx: usize, basis: SplitBasis) -> &str {
        let t = &self.tracks[idx];
        match basis {
            SplitBasis::Artist => &t.artist_id,
            SplitBasis::Album => &t.album_id,
        }
    }

    fn buckets(&self, basis: SplitBasis) -> &BTreeMap<String, Vec<usize>> {
        match basis {
            SplitBasis::Artist => &self.by_artist,
            SplitBasis::Album => &self.by_album,
        }
    }

    /// Sub-catalog holding only the given artists' tracks.
    pub fn restrict_to_artists<'a>(&self, artists: impl IntoIterator<Item = &'a str>) -> Result<Self, CatalogError> {
        let keep: BTreeSet<&str> = artists.into_iter().collect();
        let records = self.tracks.iter().filter(|t| keep.contains(t.artist_id.as_str())).cloned().collect();
        CatalogIndex::from_records(records, self.root.clone())
    }

    /// Cross-check buckets against records. Returns a list of problems.
    pub fn check_consistency(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen_artist = vec![0usize; self.tracks.len()];
        let mut seen_album = vec![0usize; self.tracks.len()];
        for (artist, members) in &self.by_artist {
            for &i in members {
                seen_artist[i] += 1;
                if &self.tracks[i].artist_id != artist {
                    problems.push(format!("track {} in wrong artist bucket {artist}", self.tracks[i].track_id));
                }
            }
        }
        for (album, members) in &self.by_album {
            for &i in members {
                seen_album[i] += 1;
                if &self.tracks[i].album_id != album {
                    problems.push(format!("track {} in wrong album bucket {album}", self.tracks[i].track_id));
                }
            }
        }
        for (i, t) in self.tracks.iter().enumerate() {
            if seen_artist[i] != 1 || seen_album[i] != 1 {
                problems.push(format!(
                    "track {} appears in {} artist and {} album buckets",
                    t.track_id, seen_artist[i], seen_album[i]
                ));
            }
        }
        problems
    }
}

/// Result of [`load_catalog`]: the index plus rows rejected as too short.
#[derive(Debug, Clone)]
pub struct LoadedCatalog {
    pub index: CatalogIndex,
    pub rejected: Vec<RejectedRecord>,
}

const COLUMNS: [&str; 5] = ["track_id", "artist_id", "album_id", "feature_ref", "n_frames"];

/// Read a `track_id,artist_id,album_id,feature_ref,n_frames` CSV.
pub fn load_catalog(path: &Path, segment_len: u32) -> Result<LoadedCatalog, CatalogError> {
    let read_err = |message: String| CatalogError::Read { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| read_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| read_err(e.to_string()))?.clone();
    let mut col = [0usize; 5];
    for (slot, name) in col.iter_mut().zip(COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| CatalogError::MissingColumn(name.to_string()))?;
    }

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CatalogError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str, CatalogError> {
            let v = row.get(col[i]).unwrap_or("");
            if v.is_empty() {
                Err(CatalogError::MalformedRow { line, message: format!("empty `{}`", COLUMNS[i]) })
            } else {
                Ok(v)
            }
        };
        let n_frames: u32 =
            field(4)?.parse().ok().filter(|&n: &u32| n > 0).ok_or_else(|| CatalogError::MalformedRow {
                line,
                message: format!("n_frames `{}` is not a positive integer", row.get(col[4]).unwrap_or("")),
            })?;
        let rec = TrackRecord {
            track_id: field(0)?.to_string(),
            artist_id: field(1)?.to_string(),
            album_id: field(2)?.to_string(),
            feature_ref: field(3)?.to_string(),
            n_frames,
        };
        if n_frames < segment_len {
            rejected.push(RejectedRecord { line, track_id: rec.track_id, n_frames, segment_len });
        } else {
            records.push(rec);
        }
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let index = CatalogIndex::from_records(records, root)?;
    Ok(LoadedCatalog { index, rejected })
}

/// Write records as a metadata CSV.
pub fn write_catalog(path: &Path, records: &[TrackRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            r.track_id.as_str(),
            r.artist_id.as_str(),
            r.album_id.as_str(),
            r.feature_ref.as_str(),
            &r.n_frames.to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBasis {
    Artist,
    Album,
}

impl SplitBasis {
    /// Songs per group and their (train, val, test) partition.
    pub fn sizes(self) -> (usize, usize, usize) {
        match self {
            SplitBasis::Artist => (16, 2, 2),
            SplitBasis::Album => (8, 1, 1),
        }
    }

    pub fn songs_per_group(self) -> usize {
        let (a, b, c) = self.sizes();
        a + b + c
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitBasis::Artist => "artist",
            SplitBasis::Album => "album",
        }
    }
}

impl fmt::Display for SplitBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub basis: SplitBasis,
    pub seed: u64,
    pub groups: BTreeMap<String, GroupSplit>,
}

impl Split {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn n_tracks(&self) -> (usize, usize, usize) {
        self.groups.values().fold((0, 0, 0), |(a, b, c), g| (a + g.train.len(), b + g.val.len(), c + g.test.len()))
    }
}

pub fn build_artist_split(catalog: &CatalogIndex, n_artists: usize, seed: u64) -> Result<Split, CatalogError> {
    build_split(catalog, SplitBasis::Artist, n_artists, seed)
}

pub fn build_album_split(catalog: &CatalogIndex, n_albums: usize, seed: u64) -> Result<Split, CatalogError> {
    build_split(catalog, SplitBasis::Album, n_albums, seed)
}

/// Seeded group selection followed by a per-group seeded partition.
///
/// Each group's partition is drawn from its own substream keyed by the group
/// id, so a group is assigned identically whatever else gets selected.
pub fn build_split(
    catalog: &CatalogIndex,
    basis: SplitBasis,
    n_groups: usize,
    seed: u64,
) -> Result<Split, CatalogError> {
    if n_groups == 0 {
        return Err(CatalogError::EmptyRequest);
    }
    let per_group = basis.songs_per_group();
    let (n_train, n_val, _) = basis.sizes();
    let qualifying: Vec<&String> =
        catalog.buckets(basis).iter().filter(|(_, members)| members.len() >= per_group).map(|(id, _)| id).collect();
    if qualifying.len() < n_groups {
        return Err(CatalogError::Shortfall {
            basis,
            requested: n_groups,
            available: qualifying.len(),
            shortfall: n_groups - qualifying.len(),
            needed: per_group,
        });
    }
    let mut select_rng = rng::substream(seed, &format!("split/{basis}/select"));
    let chosen: Vec<&String> = qualifying.choose_multiple(&mut select_rng, n_groups).copied().collect();

    let mut groups = BTreeMap::new();
    for id in chosen {
        let mut group_rng = rng::substream(seed, &format!("split/{basis}/group/{id}"));
        let members = &catalog.buckets(basis)[id];
        let mut picked: Vec<usize> = members.choose_multiple(&mut group_rng, per_group).copied().collect();
        picked.shuffle(&mut group_rng);
        let name = |i: &usize| catalog.track(*i).track_id.clone();
        let mut g = GroupSplit {
            train: picked[..n_train].iter().map(name).collect(),
            val: picked[n_train..n_train + n_val].iter().map(name).collect(),
            test: picked[n_train + n_val..].iter().map(name).collect(),
        };
        g.train.sort();
        g.val.sort();
        g.test.sort();
        groups.insert(id.clone(), g);
    }
    Ok(Split { basis, seed, groups })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitIssue {
    UnknownTrack { group: String, track_id: String },
    WrongGroup { group: String, track_id: String, actual: String },
    DuplicateTrack { track_id: String, first_group: String, second_group: String },
    WrongSizes { group: String, expected: (usize, usize, usize), actual: (usize, usize, usize) },
}

impl fmt::Display for SplitIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitIssue::UnknownTrack { group, track_id } => {
                write!(f, "group {group}: track {track_id} not in catalog")
            }
            SplitIssue::WrongGroup { group, track_id, actual } => {
                write!(f, "group {group}: track {track_id} belongs to {actual}")
            }
            SplitIssue::DuplicateTrack { track_id, first_group, second_group } => {
                write!(f, "track {track_id} assigned twice ({first_group}, {second_group})")
            }
            SplitIssue::WrongSizes { group, expected, actual } => write!(
                f,
                "group {group}: sizes {}/{}/{} but expected {}/{}/{}",
                actual.0, actual.1, actual.2, expected.0, expected.1, expected.2
            ),
        }
    }
}

/// Empty iff the split satisfies every split invariant against `catalog`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<SplitIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_split(split: &Split, catalog: &CatalogIndex) -> ValidationReport {
    let mut issues = Vec::new();
    let mut owner: HashMap<&str, (&str, &str)> = HashMap::new();
    let expected = split.basis.sizes();
    for (group, g) in &split.groups {
        let actual = (g.train.len(), g.val.len(), g.test.len());
        if actual != expected {
            issues.push(SplitIssue::WrongSizes { group: group.clone(), expected, actual });
        }
        for (part, ids) in [("train", &g.train), ("val", &g.val), ("test", &g.test)] {
            for id in ids {
                if let Some((first_group, first_part)) = owner.insert(id, (group, part)) {
                    issues.push(SplitIssue::DuplicateTrack {
                        track_id: id.clone(),
                        first_group: format!("{first_group}/{first_part}"),
                        second_group: format!("{group}/{part}"),
                    });
                }
                match catalog.index_of(id) {
                    None => issues.push(SplitIssue::UnknownTrack { group: group.clone(), track_id: id.clone() }),
                    Some(i) => {
                        let actual = catalog.group_of(i, split.basis);
                        if actual != group {
                            issues.push(SplitIssue::WrongGroup {
                                group: group.clone(),
                                track_id: id.clone(),
                                actual: actual.to_string(),
                            });
                        }
                    }
                }
            }
        }
    }
    ValidationReport { issues }
}
