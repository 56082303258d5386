//! The shared segment encoder.
//!
//! A stack of conv → ReLU → pool blocks over the segment's time–frequency
//! grid, pooled down to 1×1, followed by a linear projection and L2
//! normalisation. Every tuple slot goes through the same parameters, so
//! anchors, positives and negatives are embedded by literally the same code
//! path.
//!
//! Parameters live in one flat `Vec<f64>`; layers address it by offset. The
//! optimiser, the checkpoint format and the finite-difference checks all work
//! on that vector directly.

mod layers;

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{extract_segment, FeatureMatrix, Segment};
use crate::rng;
use layers::BlockShape;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("pooling reduces the {t}x{f} input to {out_t}x{out_f}, not 1x1")]
    PoolingNotReduced { t: usize, f: usize, out_t: usize, out_f: usize },
    #[error("segment shape {got_t}x{got_f} does not match encoder input {want_t}x{want_f}")]
    ShapeMismatch { got_t: usize, got_f: usize, want_t: usize, want_f: usize },
    #[error("vector norm {0} cannot be normalised")]
    ZeroNorm(f64),
    #[error("vector is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("track has {n_frames} frames, shorter than a {segment_len}-frame window")]
    TrackTooShort { n_frames: usize, segment_len: usize },
    #[error("hop must be >= 1")]
    ZeroHop,
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

pub const UNIT_NORM_TOL: f64 = 1e-5;

impl Embedding {
    pub fn normalize(mut v: Vec<f64>) -> Result<Self, ModelError> {
        let norm = l2(&v);
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(ModelError::ZeroNorm(norm));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Embedding(v))
    }

    /// Wrap a vector that is already unit norm.
    pub fn from_unit(v: Vec<f64>) -> Result<Self, ModelError> {
        let norm = l2(&v);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ModelError::NotUnitNorm(norm));
        }
        Ok(Embedding(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    /// Base filter count, before `filter_multiplier`.
    pub filters: usize,
    /// (time, freq)
    pub kernel: [usize; 2],
    /// (time, freq); floor mode.
    pub pool: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_frames: usize,
    pub input_bins: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub filter_multiplier: f64,
    pub pooling: PoolKind,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Desk-scale encoder for 8-frame × 12-bin synthetic segments.
    fn default() -> Self {
        let block = |filters, pool| ConvBlock { filters, kernel: [3, 3], pool };
        EncoderConfig {
            input_frames: 8,
            input_bins: 12,
            conv_blocks: vec![block(4, [2, 2]), block(8, [2, 3]), block(8, [2, 2]), block(16, [1, 1])],
            embedding_dim: 32,
            filter_multiplier: 2.0,
            pooling: PoolKind::Max,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Four-block encoder for 129-frame × 128-band log-mel segments
    /// (three seconds at 22050 Hz, hop 512) with a 256-d embedding.
    pub fn mel() -> Self {
        let block = |filters, pool| ConvBlock { filters, kernel: [3, 3], pool };
        EncoderConfig {
            input_frames: 129,
            input_bins: 128,
            conv_blocks: vec![block(16, [4, 4]), block(32, [4, 4]), block(32, [4, 4]), block(64, [2, 2])],
            embedding_dim: 256,
            filter_multiplier: 2.0,
            pooling: PoolKind::Max,
            seed: 0,
        }
    }

    /// Filter count of each block after applying the multiplier.
    pub fn realized_filters(&self) -> Result<Vec<usize>, ModelError> {
        self.conv_blocks
            .iter()
            .map(|b| {
                let x = b.filters as f64 * self.filter_multiplier;
                let r = x.round();
                if (x - r).abs() > 1e-9 || r < 1.0 {
                    Err(ModelError::InvalidConfig(format!(
                        "{} filters x {} is not a positive integer",
                        b.filters, self.filter_multiplier
                    )))
                } else {
                    Ok(r as usize)
                }
            })
            .collect()
    }

    fn plan(&self) -> Result<Plan, ModelError> {
        if self.input_frames == 0 || self.input_bins == 0 || self.embedding_dim == 0 {
            return Err(ModelError::InvalidConfig("input and embedding sizes must be >= 1".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(ModelError::InvalidConfig("at least one conv block".into()));
        }
        if !(self.filter_multiplier > 0.0) {
            return Err(ModelError::InvalidConfig("filter_multiplier must be > 0".into()));
        }
        let filters = self.realized_filters()?;
        let (mut t, mut f, mut c) = (self.input_frames, self.input_bins, 1);
        let mut off = 0;
        let mut blocks = Vec::new();
        for (b, &out_c) in self.conv_blocks.iter().zip(&filters) {
            let [kt, kf] = b.kernel;
            let [pt, pf] = b.pool;
            if kt == 0 || kf == 0 || pt == 0 || pf == 0 {
                return Err(ModelError::InvalidConfig("kernel and pool sizes must be >= 1".into()));
            }
            if pt > t || pf > f {
                return Err(ModelError::PoolingNotReduced {
                    t: self.input_frames,
                    f: self.input_bins,
                    out_t: t / pt,
                    out_f: f / pf,
                });
            }
            let shape =
                BlockShape { in_c: c, out_c, t, f, kt, kf, pt, pf, w_off: off, b_off: off + out_c * c * kt * kf };
            off = shape.b_off + out_c;
            t = shape.out_t();
            f = shape.out_f();
            c = out_c;
            blocks.push(shape);
        }
        if (t, f) != (1, 1) {
            return Err(ModelError::PoolingNotReduced { t: self.input_frames, f: self.input_bins, out_t: t, out_f: f });
        }
        let proj_w = off;
        let proj_b = proj_w + self.embedding_dim * c;
        Ok(Plan { blocks, feat: c, emb: self.embedding_dim, proj_w, proj_b, n_params: proj_b + self.embedding_dim })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    blocks: Vec<BlockShape>,
    feat: usize,
    emb: usize,
    proj_w: usize,
    proj_b: usize,
    n_params: usize,
}

/// Activations kept from a forward pass for [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every block; the last entry is the pooled feature vector.
    inputs: Vec<Vec<f64>>,
    /// Post-ReLU, pre-pool activations of every block.
    activations: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
    raw: Vec<f64>,
    norm: f64,
    out: Vec<f64>,
}

impl Trace {
    pub fn embedding(&self) -> &[f64] {
        &self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    plan: Plan,
    params: Vec<f64>,
}

/// Build an encoder with seeded He-normal conv weights.
pub fn init_encoder(config: &EncoderConfig) -> Result<Encoder, ModelError> {
    Encoder::new(config.clone())
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self, ModelError> {
        let plan = config.plan()?;
        let mut rng = rng::substream(config.seed, "encoder/init");
        let mut params = vec![0.0; plan.n_params];
        let mut normal = |scale: f64| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        for b in &plan.blocks {
            let std = (2.0 / (b.in_c * b.kt * b.kf) as f64).sqrt();
            for w in &mut params[b.w_off..b.w_off + b.n_weights()] {
                *w = normal(std);
            }
        }
        let std = (1.0 / plan.feat as f64).sqrt();
        for w in &mut params[plan.proj_w..plan.proj_b] {
            *w = normal(std);
        }
        // Nonzero bias keeps all-zero features (silence) normalisable.
        for b in &mut params[plan.proj_b..] {
            *b = normal(0.01);
        }
        Ok(Encoder { config, plan, params })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        let plan = config.plan()?;
        if params.len() != plan.n_params {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                plan.n_params,
                params.len()
            )));
        }
        Ok(Encoder { config, plan, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.plan.n_params
    }

    pub fn embedding_dim(&self) -> usize {
        self.plan.emb
    }

    /// Realized output channels of each conv block.
    pub fn block_filters(&self) -> Vec<usize> {
        self.plan.blocks.iter().map(|b| b.out_c).collect()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_shape(&self, seg: &Segment) -> Result<(), ModelError> {
        if seg.len != self.config.input_frames || seg.n_bins != self.config.input_bins {
            return Err(ModelError::ShapeMismatch {
                got_t: seg.len,
                got_f: seg.n_bins,
                want_t: self.config.input_frames,
                want_f: self.config.input_bins,
            });
        }
        Ok(())
    }

    /// Forward pass keeping what backward needs.
    pub fn forward_traced(&self, seg: &Segment) -> Result<Trace, ModelError> {
        self.check_shape(seg)?;
        let mut inputs = Vec::with_capacity(self.plan.blocks.len() + 1);
        let mut activations = Vec::with_capacity(self.plan.blocks.len());
        let mut argmax = Vec::with_capacity(self.plan.blocks.len());
        let mut x = seg.values.clone();
        for b in &self.plan.blocks {
            let mut act = vec![0.0; b.out_c * b.t * b.f];
            layers::conv_forward(b, &self.params, &x, &mut act);
            layers::relu_inplace(&mut act);
            let mut pooled = vec![0.0; b.out_c * b.out_t() * b.out_f()];
            match self.config.pooling {
                PoolKind::Max => {
                    let mut idx = vec![0u32; pooled.len()];
                    layers::max_pool_forward(b, &act, &mut pooled, &mut idx);
                    argmax.push(idx);
                }
                PoolKind::Avg => {
                    layers::avg_pool_forward(b, &act, &mut pooled);
                    argmax.push(Vec::new());
                }
            }
            inputs.push(x);
            activations.push(act);
            x = pooled;
        }
        let p = &self.plan;
        let mut raw = self.params[p.proj_b..p.proj_b + p.emb].to_vec();
        for (e, r) in raw.iter_mut().enumerate() {
            let row = &self.params[p.proj_w + e * p.feat..p.proj_w + (e + 1) * p.feat];
            *r += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        }
        inputs.push(x);
        let norm = l2(&raw);
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(ModelError::ZeroNorm(norm));
        }
        let out = raw.iter().map(|r| r / norm).collect();
        Ok(Trace { inputs, activations, argmax, raw, norm, out })
    }

    /// Accumulate `d loss / d params` into `grad`, given `d loss / d embedding`.
    pub fn backward(&self, trace: &Trace, d_emb: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.plan.n_params);
        let p = &self.plan;
        // Through the L2 normalisation.
        let y = &trace.out;
        let dot: f64 = y.iter().zip(d_emb).map(|(a, b)| a * b).sum();
        let d_raw: Vec<f64> = y.iter().zip(d_emb).map(|(yi, gi)| (gi - yi * dot) / trace.norm).collect();
        let feat = trace.inputs.last().expect("feature vector");
        let mut d_x = vec![0.0; p.feat];
        for (e, &g) in d_raw.iter().enumerate() {
            grad[p.proj_b + e] += g;
            let w_row = p.proj_w + e * p.feat;
            for c in 0..p.feat {
                grad[w_row + c] += g * feat[c];
                d_x[c] += g * self.params[w_row + c];
            }
        }
        for (i, b) in p.blocks.iter().enumerate().rev() {
            let act = &trace.activations[i];
            let mut d_act = vec![0.0; act.len()];
            match self.config.pooling {
                PoolKind::Max => {
                    for (k, &at) in trace.argmax[i].iter().enumerate() {
                        d_act[at as usize] += d_x[k];
                    }
                }
                PoolKind::Avg => layers::avg_pool_backward(b, &d_x, &mut d_act),
            }
            for (d, &a) in d_act.iter_mut().zip(act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            if i == 0 {
                layers::conv_backward(b, &self.params, &trace.inputs[i], &d_act, grad, None);
            } else {
                let mut d_in = vec![0.0; trace.inputs[i].len()];
                layers::conv_backward(b, &self.params, &trace.inputs[i], &d_act, grad, Some(&mut d_in));
                d_x = d_in;
            }
        }
    }

    /// Pre-normalisation output, exposed for checks on the projection.
    pub fn raw_output(&self, trace: &Trace) -> Vec<f64> {
        trace.raw.clone()
    }
}

/// Anything that maps a segment to a unit-norm embedding.
pub trait SegmentEncoder: Sync {
    /// (frames, bins) the encoder accepts.
    fn input_shape(&self) -> (usize, usize);
    fn encode(&self, seg: &Segment) -> Result<Embedding, ModelError>;
}

impl SegmentEncoder for Encoder {
    fn input_shape(&self) -> (usize, usize) {
        (self.config.input_frames, self.config.input_bins)
    }

    fn encode(&self, seg: &Segment) -> Result<Embedding, ModelError> {
        let trace = self.forward_traced(seg)?;
        Ok(Embedding(trace.out))
    }
}

/// Deterministic inference on one segment.
pub fn embed(encoder: &impl SegmentEncoder, seg: &Segment) -> Result<Embedding, ModelError> {
    encoder.encode(seg)
}

/// Mean of window embeddings at stride `hop`, renormalised.
pub fn embed_song(
    encoder: &(impl SegmentEncoder + ?Sized),
    feature: &FeatureMatrix,
    hop: usize,
) -> Result<Embedding, ModelError> {
    if hop == 0 {
        return Err(ModelError::ZeroHop);
    }
    let (len, _) = encoder.input_shape();
    if feature.n_frames() < len {
        return Err(ModelError::TrackTooShort { n_frames: feature.n_frames(), segment_len: len });
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut start = 0;
    while start + len <= feature.n_frames() {
        let seg = extract_segment(feature, 0, start, len).expect("window in range");
        let e = encoder.encode(&seg)?;
        if sum.is_empty() {
            sum = e.0;
        } else {
            sum.iter_mut().zip(&e.0).for_each(|(s, v)| *s += v);
        }
        start += hop;
    }
    Embedding::normalize(sum)
}

/// Fixed random projection of the segment's mean frame; a structure-free
/// baseline encoder.
#[derive(Debug, Clone)]
pub struct MeanProjection {
    frames: usize,
    bins: usize,
    dim: usize,
    w: Vec<f64>,
}

impl MeanProjection {
    pub fn new(frames: usize, bins: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "encoder/mean-projection");
        let w = (0..dim * bins).map(|_| StandardNormal.sample(&mut rng)).collect();
        MeanProjection { frames, bins, dim, w }
    }
}

impl SegmentEncoder for MeanProjection {
    fn input_shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    fn encode(&self, seg: &Segment) -> Result<Embedding, ModelError> {
        if seg.len != self.frames || seg.n_bins != self.bins {
            return Err(ModelError::ShapeMismatch {
                got_t: seg.len,
                got_f: seg.n_bins,
                want_t: self.frames,
                want_f: self.bins,
            });
        }
        let mut mean = vec![0.0; self.bins];
        for row in seg.values.chunks_exact(self.bins) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        let v = (0..self.dim)
            .map(|d| self.w[d * self.bins..(d + 1) * self.bins].iter().zip(&mean).map(|(a, b)| a * b).sum())
            .collect();
        Embedding::normalize(v)
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} ->", self.input_frames, self.input_bins)?;
        for b in &self.conv_blocks {
            write!(f, " [{}f {}x{} /{}x{}]", b.filters, b.kernel[0], b.kernel[1], b.pool[0], b.pool[1])?;
        }
        write!(f, " -> {} (x{} filters)", self.embedding_dim, self.filter_multiplier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SegmentRef;
    use rand::Rng as _;

    fn random_segment(frames: usize, bins: usize, seed: u64) -> Segment {
        let mut rng = rng::substream(seed, "test/segment");
        Segment {
            values: (0..frames * bins).map(|_| rng.random_range(-1.0..1.0)).collect(),
            len: frames,
            n_bins: bins,
            source: SegmentRef { track: 0, start: 0 },
        }
    }

    pub(crate) fn mini_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_frames: 6,
            input_bins: 4,
            conv_blocks: vec![
                ConvBlock { filters: 2, kernel: [3, 3], pool: [2, 2] },
                ConvBlock { filters: 2, kernel: [2, 3], pool: [3, 2] },
            ],
            embedding_dim: 8,
            filter_multiplier: 2.0,
            pooling: PoolKind::Max,
            seed,
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        for s in 0..20 {
            let e = embed(&enc, &random_segment(8, 12, s)).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-5);
            assert_eq!(e.dim(), 32);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Encoder::new(EncoderConfig::default()).unwrap();
        let b = Encoder::new(EncoderConfig::default()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Encoder::new(EncoderConfig { seed: 1, ..EncoderConfig::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn multiplier_doubles_filters() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(cfg.clone()).unwrap();
        let base: Vec<usize> = cfg.conv_blocks.iter().map(|b| b.filters).collect();
        assert_eq!(enc.block_filters(), base.iter().map(|f| 2 * f).collect::<Vec<_>>());
        let odd = EncoderConfig { filter_multiplier: 1.5, ..mini_config(0) };
        assert!(Encoder::new(odd.clone()).is_ok());
        let bad = EncoderConfig { filter_multiplier: 1.3, ..mini_config(0) };
        assert!(matches!(Encoder::new(bad), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn pooling_must_reach_one_by_one() {
        let mut cfg = EncoderConfig::default();
        cfg.conv_blocks.pop();
        cfg.conv_blocks[2].pool = [1, 1];
        assert!(matches!(Encoder::new(cfg), Err(ModelError::PoolingNotReduced { .. })));
    }

    #[test]
    fn mel_config_is_valid() {
        let cfg = EncoderConfig::mel();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.emb, 256);
        assert_eq!(plan.blocks.len(), 4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        assert!(matches!(embed(&enc, &random_segment(9, 12, 0)), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn cosine_varies_across_pairs() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let sims: Vec<f64> = (0..20)
            .map(|i| {
                let a = embed(&enc, &random_segment(8, 12, 2 * i)).unwrap();
                let b = embed(&enc, &random_segment(8, 12, 2 * i + 1)).unwrap();
                a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect();
        assert!(sims.iter().all(|s| *s > -1.0 && *s < 1.0));
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sims.len() as f64;
        assert!(var > 0.0);
    }

    #[test]
    fn silence_is_encodable() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let seg = Segment { values: vec![0.0; 96], len: 8, n_bins: 12, source: SegmentRef { track: 0, start: 0 } };
        assert!((embed(&enc, &seg).unwrap().norm() - 1.0).abs() < 1e-9);
    }

    /// Central differences of a scalar function of the embedding.
    fn check_grad(cfg: EncoderConfig) {
        let enc = Encoder::new(cfg.clone()).unwrap();
        let seg = random_segment(cfg.input_frames, cfg.input_bins, 99);
        let probe: Vec<f64> = (0..cfg.embedding_dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |e: &Encoder| -> f64 {
            let t = e.forward_traced(&seg).unwrap();
            t.embedding().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let trace = enc.forward_traced(&seg).unwrap();
        let mut grad = vec![0.0; enc.n_params()];
        enc.backward(&trace, &probe, &mut grad);
        let h = 1e-6;
        for i in 0..enc.n_params() {
            let mut p = enc.clone();
            p.params[i] += h;
            let up = f(&p);
            p.params[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_max() {
        check_grad(mini_config(3));
    }

    #[test]
    fn backward_matches_finite_differences_avg() {
        check_grad(EncoderConfig { pooling: PoolKind::Avg, ..mini_config(4) });
    }

    #[test]
    fn song_embedding_means_windows() {
        let enc = Encoder::new(mini_config(1)).unwrap();
        let seg = random_segment(30, 4, 5);
        let m = FeatureMatrix::new(30, 4, seg.values.iter().map(|&v| v as f32).collect()).unwrap();
        let song = embed_song(&enc, &m, 6).unwrap();
        // Oracle: five windows at 0, 6, 12, 18, 24.
        let mut sum = vec![0.0; 8];
        for k in 0..5 {
            let w = extract_segment(&m, 0, 6 * k, 6).unwrap();
            let e = embed(&enc, &w).unwrap();
            sum.iter_mut().zip(e.as_slice()).for_each(|(s, v)| *s += v);
        }
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in song.as_slice().iter().zip(&sum) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn short_song_is_single_window() {
        let enc = Encoder::new(mini_config(1)).unwrap();
        let seg = random_segment(8, 4, 6);
        let m = FeatureMatrix::new(8, 4, seg.values.iter().map(|&v| v as f32).collect()).unwrap();
        let song = embed_song(&enc, &m, 6).unwrap();
        let one = embed(&enc, &extract_segment(&m, 0, 0, 6).unwrap()).unwrap();
        for (a, b) in song.as_slice().iter().zip(one.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let short = FeatureMatrix::new(5, 4, vec![0.0; 20]).unwrap();
        assert!(matches!(embed_song(&enc, &short, 6), Err(ModelError::TrackTooShort { .. })));
    }

    #[test]
    fn identical_windows_give_window_embedding() {
        let enc = Encoder::new(mini_config(2)).unwrap();
        let row: Vec<f32> = vec![0.3, -0.2, 0.9, 0.1];
        let m = FeatureMatrix::new(18, 4, row.iter().cycle().take(72).copied().collect()).unwrap();
        let song = embed_song(&enc, &m, 6).unwrap();
        let one = embed(&enc, &extract_segment(&m, 0, 0, 6).unwrap()).unwrap();
        for (a, b) in song.as_slice().iter().zip(one.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_constructors() {
        assert!(Embedding::normalize(vec![0.0, 0.0]).is_err());
        assert!(Embedding::from_unit(vec![0.6, 0.8]).is_ok());
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
    }
}
