//! Feature matrices, the `TFM1` file format, segment extraction, and a
//! log-mel front end for real audio.
//!
//! `TFM1` layout: the magic `b"TFM1"`, `n_frames: u32 LE`, `n_bins: u32 LE`,
//! then `n_frames * n_bins` little-endian `f32` values in row-major
//! (frame-major) order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CatalogIndex;

pub const MAGIC: &[u8; 4] = b"TFM1";
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"TFM1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: non-finite value at byte offset {offset}")]
    NonFinite { path: PathBuf, offset: usize },
    #[error("degenerate shape {n_frames}x{n_bins}")]
    EmptyShape { n_frames: usize, n_bins: usize },
    #[error("segment [{start}, {start}+{len}) exceeds {n_frames} frames")]
    OutOfRange { start: usize, len: usize, n_frames: usize },
    #[error("audio sample rate {got} Hz unsupported, configured rate is {expected} Hz (no resampling)")]
    UnsupportedSampleRate { got: u32, expected: u32 },
    #[error("empty audio")]
    EmptyAudio,
    #[error("invalid mel parameters: {0}")]
    BadMelParams(String),
    #[error("catalog says {track_id} has {expected} frames, file has {found}")]
    FrameCountMismatch { track_id: String, expected: u32, found: usize },
}

/// A frames × bins matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_frames: usize,
    n_bins: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, n_bins: usize, values: Vec<f32>) -> Result<Self, FeatureError> {
        if n_frames == 0 || n_bins == 0 {
            return Err(FeatureError::EmptyShape { n_frames, n_bins });
        }
        assert_eq!(values.len(), n_frames * n_bins, "value count must match shape");
        Ok(FeatureMatrix { n_frames, n_bins, values })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_bins..(t + 1) * self.n_bins]
    }

    /// Mean over frames; the raw-feature baseline representation.
    pub fn frame_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n_bins];
        for t in 0..self.n_frames {
            for (m, &v) in mean.iter_mut().zip(self.frame(t)) {
                *m += v as f64;
            }
        }
        let inv = 1.0 / self.n_frames as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_bins as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, FeatureError> {
        let path_buf = || path.to_path_buf();
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::Truncated { path: path_buf(), expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(FeatureError::BadMagic { path: path_buf(), found: magic });
        }
        let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n_bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + 4 * n_frames * n_bins;
        if bytes.len() < expected {
            return Err(FeatureError::Truncated { path: path_buf(), expected, found: bytes.len() });
        }
        let mut values = Vec::with_capacity(n_frames * n_bins);
        for (i, chunk) in bytes[HEADER_LEN..expected].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FeatureError::NonFinite { path: path_buf(), offset: HEADER_LEN + 4 * i });
            }
            values.push(v);
        }
        FeatureMatrix::new(n_frames, n_bins, values)
    }
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::write(path, m.to_bytes()).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let bytes = fs::read(path).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
    FeatureMatrix::from_bytes(&bytes, path)
}

/// Where a segment was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    /// Index into the catalog's track list.
    pub track: usize,
    pub start: usize,
}

/// A contiguous window of `len` frames, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub values: Vec<f64>,
    pub len: usize,
    pub n_bins: usize,
    pub source: SegmentRef,
}

pub fn extract_segment(
    feature: &FeatureMatrix,
    track: usize,
    start: usize,
    segment_len: usize,
) -> Result<Segment, FeatureError> {
    if segment_len == 0 || start + segment_len > feature.n_frames {
        return Err(FeatureError::OutOfRange { start, len: segment_len, n_frames: feature.n_frames });
    }
    let nb = feature.n_bins;
    let values = feature.values[start * nb..(start + segment_len) * nb].iter().map(|&v| v as f64).collect();
    Ok(Segment { values, len: segment_len, n_bins: nb, source: SegmentRef { track, start } })
}

/// Feature matrices for every catalog track, indexed like the catalog.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    mats: Vec<Arc<FeatureMatrix>>,
}

impl FeatureStore {
    pub fn from_matrices(mats: Vec<FeatureMatrix>) -> Self {
        FeatureStore { mats: mats.into_iter().map(Arc::new).collect() }
    }

    /// Load every track's feature file and check it against the catalog.
    pub fn load(catalog: &CatalogIndex) -> Result<Self, FeatureError> {
        let mut mats = Vec::with_capacity(catalog.len());
        for (i, rec) in catalog.tracks().iter().enumerate() {
            let m = load_features(&catalog.feature_path(i))?;
            if m.n_frames() != rec.n_frames as usize {
                return Err(FeatureError::FrameCountMismatch {
                    track_id: rec.track_id.clone(),
                    expected: rec.n_frames,
                    found: m.n_frames(),
                });
            }
            mats.push(Arc::new(m));
        }
        Ok(FeatureStore { mats })
    }

    pub fn get(&self, track: usize) -> &FeatureMatrix {
        &self.mats[track]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn segment(&self, r: SegmentRef, segment_len: usize) -> Result<Segment, FeatureError> {
        extract_segment(&self.mats[r.track], r.track, r.start, segment_len)
    }

    /// Same backing matrices, reindexed by `order` (positions into `self`).
    pub fn reindex(&self, order: &[usize]) -> Self {
        FeatureStore { mats: order.iter().map(|&i| Arc::clone(&self.mats[i])).collect() }
    }
}

/// Log-mel front-end parameters. Defaults: 22050 Hz, 1024-sample Hann
/// window, hop 512, 128 HTK-scale bands, `ln(1 + 10·magnitude)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge; 0 means Nyquist.
    pub fmax: f64,
    pub log_scale: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams { sample_rate: 22050, n_fft: 1024, hop: 512, n_mels: 128, fmin: 0.0, fmax: 0.0, log_scale: 10.0 }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelParams {
    fn upper(&self) -> f64 {
        if self.fmax > 0.0 {
            self.fmax
        } else {
            self.sample_rate as f64 / 2.0
        }
    }

    /// The `n_mels + 2` band edge frequencies; band `k` peaks at edge `k + 1`.
    pub fn band_edges_hz(&self) -> Vec<f64> {
        let lo = hz_to_mel(self.fmin);
        let hi = hz_to_mel(self.upper());
        let n = self.n_mels + 1;
        (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
    }

    /// Triangular filters over the `n_fft / 2 + 1` FFT bins, peak weight 1.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let edges = self.band_edges_hz();
        let n_bins = self.n_fft / 2 + 1;
        let bin_hz = self.sample_rate as f64 / self.n_fft as f64;
        (0..self.n_mels)
            .map(|k| {
                let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn validate(&self) -> Result<(), FeatureError> {
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(FeatureError::BadMelParams(format!("{self:?}")));
        }
        if self.fmin < 0.0 || self.upper() <= self.fmin || self.upper() > self.sample_rate as f64 / 2.0 {
            return Err(FeatureError::BadMelParams(format!("band range [{}, {}] Hz", self.fmin, self.upper())));
        }
        Ok(())
    }
}

/// Log-compressed mel magnitudes with `max(1, len / hop)` frames.
///
/// Frame `k` covers samples `[k·hop, k·hop + n_fft)` with zero padding past
/// the end of the signal.
pub fn compute_melspectrogram(
    audio: &[f32],
    sample_rate: u32,
    params: &MelParams,
) -> Result<FeatureMatrix, FeatureError> {
    params.validate()?;
    if sample_rate != params.sample_rate {
        return Err(FeatureError::UnsupportedSampleRate { got: sample_rate, expected: params.sample_rate });
    }
    if audio.is_empty() {
        return Err(FeatureError::EmptyAudio);
    }
    let n_fft = params.n_fft;
    let n_frames = (audio.len() / params.hop).max(1);
    let window: Vec<f64> =
        (0..n_fft).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos()).collect();
    let filters = params.filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0; n_fft / 2 + 1];
    let mut values = Vec::with_capacity(n_frames * params.n_mels);
    for k in 0..n_frames {
        let start = k * params.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = audio.get(start + i).copied().unwrap_or(0.0) as f64;
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filt in &filters {
            let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            values.push((1.0 + params.log_scale * e).ln() as f32);
        }
    }
    FeatureMatrix::new(n_frames, params.n_mels, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n_frames: usize, n_bins: usize) -> FeatureMatrix {
        let v = (0..n_frames * n_bins).map(|i| i as f32 * 0.5 - 3.0).collect();
        FeatureMatrix::new(n_frames, n_bins, v).unwrap()
    }

    #[test]
    fn header_shape_is_honoured() {
        let m = ramp(10, 8);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 12 + 80 * 4);
        let back = FeatureMatrix::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!((back.n_frames(), back.n_bins()), (10, 8));
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let bytes = ramp(4, 3).to_bytes();
        let err = FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, FeatureError::Truncated { .. }));
        let err = FeatureMatrix::from_bytes(&bytes[..10], Path::new("x")).unwrap_err();
        assert!(matches!(err, FeatureError::Truncated { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureMatrix::from_bytes(&bad, Path::new("x")), Err(FeatureError::BadMagic { .. })));
    }

    #[test]
    fn non_finite_reports_offset() {
        let mut bytes = ramp(2, 2).to_bytes();
        bytes[12 + 8..12 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        match FeatureMatrix::from_bytes(&bytes, Path::new("x")).unwrap_err() {
            FeatureError::NonFinite { offset, .. } => assert_eq!(offset, 20),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tfm");
        let m = ramp(7, 5);
        write_features(&p, &m).unwrap();
        assert_eq!(load_features(&p).unwrap(), m);
    }

    #[test]
    fn segment_edges() {
        let m = ramp(12, 3);
        let whole = extract_segment(&m, 0, 0, 12).unwrap();
        assert_eq!(whole.values, m.values().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let last = extract_segment(&m, 0, 4, 8).unwrap();
        assert_eq!(last.values[0], m.frame(4)[0] as f64);
        assert!(matches!(extract_segment(&m, 0, 5, 8), Err(FeatureError::OutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn segment_matches_slice(n_frames in 1usize..40, n_bins in 1usize..6, a in 0usize..40, b in 1usize..40) {
            let m = ramp(n_frames, n_bins);
            let len = b.min(n_frames);
            let start = a % (n_frames - len + 1);
            let seg = extract_segment(&m, 3, start, len).unwrap();
            for t in 0..len {
                for f in 0..n_bins {
                    prop_assert_eq!(seg.values[t * n_bins + f], m.frame(start + t)[f] as f64);
                }
            }
        }
    }

    #[test]
    fn silence_gives_floor() {
        let m = compute_melspectrogram(&vec![0.0; 22050], 22050, &MelParams::default()).unwrap();
        assert_eq!(m.n_bins(), 128);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_seconds_is_129_frames() {
        let m = compute_melspectrogram(&vec![0.0; 3 * 22050], 22050, &MelParams::default()).unwrap();
        assert_eq!(m.n_frames(), 129);
    }

    #[test]
    fn sine_at_band_centre_peaks_in_that_band() {
        let p = MelParams::default();
        let edges = p.band_edges_hz();
        for band in [40usize, 70, 100] {
            let f0 = edges[band + 1];
            let audio: Vec<f32> =
                (0..22050).map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / 22050.0).sin() as f32).collect();
            let m = compute_melspectrogram(&audio, 22050, &p).unwrap();
            // The last frame is partly zero padded; every frame must still peak.
            for t in 0..m.n_frames() {
                let row = m.frame(t);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(argmax, band, "frame {t}, f0 {f0}");
            }
        }
    }

    #[test]
    fn wrong_sample_rate_is_refused() {
        let err = compute_melspectrogram(&[0.0; 100], 44100, &MelParams::default()).unwrap_err();
        assert!(matches!(err, FeatureError::UnsupportedSampleRate { got: 44100, .. }));
        assert!(matches!(compute_melspectrogram(&[], 22050, &MelParams::default()), Err(FeatureError::EmptyAudio)));
    }
}
