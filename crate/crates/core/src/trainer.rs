//! Joint and single-concept training.
//!
//! Each optimiser step draws one training batch per active concept, sums the
//! weighted concept losses and applies a single update to the shared encoder.
//! Every `eval_every` steps a fixed set of validation-regime tuples is scored;
//! the validation loss drives learning-rate decay on plateaus and the mean
//! validation accuracy selects the best parameters.
//!
//! With one worker, training is a pure function of the configuration: the
//! same config and seed give bit-identical parameters and metrics logs, and
//! a checkpoint/restore in the middle changes nothing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogIndex, Split};
use crate::eval::holdout::positive_wins;
use crate::features::{FeatureError, FeatureStore, SegmentRef};
use crate::loss::{dot, margin_loss_grad, LossConfig, LossError};
use crate::model::{Encoder, EncoderConfig, ModelError, Trace};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerState};
use crate::rng::{self, Rng, RngState};
use crate::sampler::{Concept, Regime, SamplerError, Tuple, TupleSampler, TupleSpec};

pub const CHECKPOINT_FORMAT: &str = "tricat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}, concept {concept}, tracks {tracks:?}")]
    NonFiniteLoss { step: u64, concept: Concept, tracks: Vec<String> },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint encoder config differs from the requested one")]
    EncoderMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub concepts: Vec<Concept>,
    pub n_negatives: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: OptimizerConfig,
    pub eval_every: u64,
    /// Validation tuples scored per concept at each evaluation.
    pub val_tuples: usize,
    pub distinct_negatives: bool,
    /// Record elapsed seconds in the metrics log. Off by default so that
    /// logs are byte-reproducible.
    pub log_wall_time: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            concepts: Concept::ALL.to_vec(),
            n_negatives: 4,
            batch_size: 16,
            steps: 2000,
            optimizer: OptimizerConfig::default(),
            eval_every: 250,
            val_tuples: 256,
            distinct_negatives: true,
            log_wall_time: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.concepts.is_empty() {
            return bad("concepts must be non-empty");
        }
        if self.n_negatives == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("n_negatives, batch_size and eval_every must be >= 1");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }

    /// Active concepts, deduplicated, in artist/album/track order.
    pub fn active_concepts(&self) -> Vec<Concept> {
        let mut c = self.concepts.clone();
        c.sort();
        c.dedup();
        c
    }
}

/// Everything the trainer reads: catalog, features and the two splits.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub catalog: &'a CatalogIndex,
    pub store: &'a FeatureStore,
    pub artist_split: Option<&'a Split>,
    pub album_split: Option<&'a Split>,
}

impl<'a> TrainData<'a> {
    pub fn split_for(&self, concept: Concept) -> Result<&'a Split, TrainError> {
        let split = match concept {
            Concept::Artist | Concept::Track => self.artist_split,
            Concept::Album => self.album_split,
        };
        split.ok_or_else(|| {
            TrainError::InvalidConfig(format!("{concept} concept needs a {}-basis split", concept.basis()))
        })
    }
}

/// One JSON-lines record per evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_artist: Option<f64>,
    pub loss_album: Option<f64>,
    pub loss_track: Option<f64>,
    pub val_acc_artist: Option<f64>,
    pub val_acc_album: Option<f64>,
    pub val_acc_track: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn val_acc(&self, c: Concept) -> Option<f64> {
        match c {
            Concept::Artist => self.val_acc_artist,
            Concept::Album => self.val_acc_album,
            Concept::Track => self.val_acc_track,
        }
    }
}

pub fn metrics_jsonl(log: &[MetricsRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub rngs: BTreeMap<Concept, RngState>,
    pub best_val_score: Option<f64>,
    /// Weighted validation loss at the best step; breaks accuracy ties.
    #[serde(default)]
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub best_params: Option<Vec<f64>>,
    /// Per-concept training-loss sums since the last evaluation.
    pub pending_loss: [f64; 3],
    pub pending_steps: u64,
    pub log: Vec<MetricsRecord>,
    pub elapsed_s: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    encoder: EncoderConfig,
    train: TrainConfig,
    loss: LossConfig,
    state: TrainState,
}

/// Configs echoed with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            state: self.state.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str, origin: &str) -> Result<Self, TrainError> {
        let corrupt = |message: String| TrainError::Checkpoint { path: origin.to_string(), message };
        let value: serde_json::Value = serde_json::from_str(s).map_err(|e| corrupt(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(corrupt("not a tricat checkpoint".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let file: CheckpointFile = serde_json::from_str(s).map_err(|e| corrupt(e.to_string()))?;
        Ok(Checkpoint { encoder: file.encoder, train: file.train, loss: file.loss, state: file.state })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json())
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let s = fs::read_to_string(path)
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), message: e.to_string() })?;
        Checkpoint::from_json(&s, &path.display().to_string())
    }

    /// Load and require a specific encoder configuration.
    pub fn restore(path: &Path, expected: &EncoderConfig) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(path)?;
        if &ck.encoder != expected {
            return Err(TrainError::EncoderMismatch);
        }
        Ok(ck)
    }

    pub fn encoder(&self) -> Result<Encoder, TrainError> {
        Ok(Encoder::from_params(self.encoder.clone(), self.state.params.clone())?)
    }

    pub fn best_encoder(&self) -> Result<Encoder, TrainError> {
        let params = self.state.best_params.clone().unwrap_or_else(|| self.state.params.clone());
        Ok(Encoder::from_params(self.encoder.clone(), params)?)
    }
}

struct ConceptStream<'a> {
    concept: Concept,
    sampler: TupleSampler<'a>,
    rng: Rng,
    val: Vec<Tuple>,
}

pub struct Trainer<'a> {
    data: TrainData<'a>,
    config: TrainConfig,
    loss: LossConfig,
    encoder: Encoder,
    optimizer: Optimizer,
    streams: Vec<ConceptStream<'a>>,
    state: TrainState,
    step_losses: Vec<f64>,
    started: Instant,
}

/// Validation accuracy and loss for one concept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub concept: Concept,
    pub accuracy: f64,
    pub loss: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        encoder_config: &EncoderConfig,
        config: &TrainConfig,
        loss: &LossConfig,
        data: TrainData<'a>,
    ) -> Result<Self, TrainError> {
        let encoder = Encoder::new(encoder_config.clone())?;
        Self::build(encoder, config, loss, data, None)
    }

    pub fn resume(checkpoint: &Checkpoint, data: TrainData<'a>) -> Result<Self, TrainError> {
        let encoder = Encoder::from_params(checkpoint.encoder.clone(), checkpoint.state.params.clone())?;
        Self::build(encoder, &checkpoint.train, &checkpoint.loss, data, Some(checkpoint.state.clone()))
    }

    fn build(
        encoder: Encoder,
        config: &TrainConfig,
        loss: &LossConfig,
        data: TrainData<'a>,
        state: Option<TrainState>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        loss.validate()?;
        let segment_len = encoder.config().input_frames;
        if data.store.len() != data.catalog.len() {
            return Err(TrainError::InvalidConfig("feature store does not match catalog".into()));
        }
        if let Some(m) =
            (0..data.store.len()).map(|i| data.store.get(i)).find(|m| m.n_bins() != encoder.config().input_bins)
        {
            return Err(TrainError::InvalidConfig(format!(
                "features have {} bins, encoder expects {}",
                m.n_bins(),
                encoder.config().input_bins
            )));
        }
        let mut streams = Vec::new();
        for concept in config.active_concepts() {
            let split = data.split_for(concept)?;
            let mut spec = TupleSpec::new(concept, Regime::Train, config.n_negatives, segment_len);
            spec.distinct_negatives = config.distinct_negatives;
            let sampler = TupleSampler::new(data.catalog, split, spec)?;
            let mut val_spec = spec;
            val_spec.regime = Regime::Validation;
            let val_sampler = TupleSampler::new(data.catalog, split, val_spec)?;
            let mut val_rng = rng::substream(config.seed, &format!("sampler/{concept}/validation"));
            let val = (0..config.val_tuples).map(|_| val_sampler.sample(&mut val_rng)).collect();
            let rng = rng::substream(config.seed, &format!("sampler/{concept}/train"));
            streams.push(ConceptStream { concept, sampler, rng, val });
        }
        let mut optimizer = Optimizer::new(config.optimizer.clone(), encoder.n_params());
        let state = match state {
            Some(s) => {
                for stream in &mut streams {
                    let saved = s.rngs.get(&stream.concept).ok_or_else(|| TrainError::Checkpoint {
                        path: String::new(),
                        message: format!("no rng state for {}", stream.concept),
                    })?;
                    stream.rng = saved.restore().ok_or_else(|| TrainError::Checkpoint {
                        path: String::new(),
                        message: "bad rng state".into(),
                    })?;
                }
                optimizer.state = s.optimizer.clone();
                s
            }
            None => TrainState {
                step: 0,
                params: encoder.params().to_vec(),
                optimizer: optimizer.state.clone(),
                rngs: BTreeMap::new(),
                best_val_score: None,
                best_val_loss: None,
                best_step: None,
                best_params: None,
                pending_loss: [0.0; 3],
                pending_steps: 0,
                log: Vec::new(),
                elapsed_s: 0.0,
            },
        };
        Ok(Trainer {
            data,
            config: config.clone(),
            loss: loss.clone(),
            encoder,
            optimizer,
            streams,
            state,
            step_losses: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn log(&self) -> &[MetricsRecord] {
        &self.state.log
    }

    /// Training loss of every step run by this trainer instance.
    pub fn step_losses(&self) -> &[f64] {
        &self.step_losses
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    fn segment(&self, r: SegmentRef) -> Result<crate::features::Segment, TrainError> {
        Ok(self.data.store.segment(r, self.encoder.config().input_frames)?)
    }

    /// Forward, loss and backward for one concept batch; returns the batch
    /// mean loss (unweighted).
    fn batch_grad(&self, concept: Concept, tuples: &[Tuple], grad: &mut [f64]) -> Result<f64, TrainError> {
        let margin = self.loss.margin(concept);
        let scale = self.loss.weight(concept) / tuples.len() as f64;
        let mut total = 0.0;
        for t in tuples {
            let traces: Vec<Trace> = t
                .segments()
                .map(|r| Ok(self.encoder.forward_traced(&self.segment(r)?)?))
                .collect::<Result<_, TrainError>>()?;
            let negs: Vec<&[f64]> = traces[2..].iter().map(|tr| tr.embedding()).collect();
            let g = margin_loss_grad(
                traces[0].embedding(),
                traces[1].embedding(),
                &negs,
                margin,
                self.loss.reduce_negatives,
                1.0,
            )?;
            total += g.loss;
            let slot_grads = [&g.anchor, &g.positive].into_iter().chain(&g.negatives);
            for (tr, d) in traces.iter().zip(slot_grads) {
                if d.iter().any(|&x| x != 0.0) {
                    let scaled: Vec<f64> = d.iter().map(|x| x * scale).collect();
                    self.encoder.backward(tr, &scaled, grad);
                }
            }
        }
        Ok(total / tuples.len() as f64)
    }

    /// One optimiser update, plus an evaluation when due.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let mut grad = vec![0.0; self.encoder.n_params()];
        let mut step_total = 0.0;
        let mut batches = Vec::with_capacity(self.streams.len());
        for i in 0..self.streams.len() {
            let stream = &mut self.streams[i];
            let batch = stream.sampler.sample_batch(&mut stream.rng, self.config.batch_size);
            batches.push((stream.concept, batch.tuples));
        }
        for (concept, tuples) in &batches {
            let loss = self.batch_grad(*concept, tuples, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let tracks = tuples
                    .iter()
                    .flat_map(|t| t.segments())
                    .map(|r| self.data.catalog.track(r.track).track_id.clone())
                    .collect();
                return Err(TrainError::NonFiniteLoss { step: self.state.step, concept: *concept, tracks });
            }
            self.state.pending_loss[concept.index()] += loss;
            step_total += self.loss.weight(*concept) * loss;
        }
        self.optimizer.step(self.encoder.params_mut(), &grad);
        self.state.step += 1;
        self.state.pending_steps += 1;
        self.step_losses.push(step_total);
        if self.state.step.is_multiple_of(self.config.eval_every) || self.state.step == self.config.steps {
            self.evaluate()?;
        }
        Ok(())
    }

    /// Score the fixed validation tuples of every active concept.
    pub fn validate(&self) -> Result<Vec<ValidationScore>, TrainError> {
        let mut out = Vec::new();
        for stream in &self.streams {
            if stream.val.is_empty() {
                continue;
            }
            let margin = self.loss.margin(stream.concept);
            let (mut correct, mut loss) = (0usize, 0.0);
            for t in &stream.val {
                let embs: Vec<Vec<f64>> = t
                    .segments()
                    .map(|r| Ok(self.encoder.forward_traced(&self.segment(r)?)?.embedding().to_vec()))
                    .collect::<Result<_, TrainError>>()?;
                let sims: Vec<f64> = embs[1..].iter().map(|e| dot(&embs[0], e)).collect();
                if positive_wins(sims[0], &sims[1..]) {
                    correct += 1;
                }
                let negs: Vec<&[f64]> = embs[2..].iter().map(|e| e.as_slice()).collect();
                loss += margin_loss_grad(&embs[0], &embs[1], &negs, margin, self.loss.reduce_negatives, 1.0)?.loss;
            }
            let n = stream.val.len() as f64;
            out.push(ValidationScore { concept: stream.concept, accuracy: correct as f64 / n, loss: loss / n });
        }
        Ok(out)
    }

    fn evaluate(&mut self) -> Result<(), TrainError> {
        let scores = self.validate()?;
        let steps = self.state.pending_steps.max(1) as f64;
        let mean_loss = |c: Concept| self.state.pending_loss[c.index()] / steps;
        let active = self.config.active_concepts();
        let loss_of = |c: Concept| active.contains(&c).then(|| mean_loss(c));
        let acc_of = |c: Concept| scores.iter().find(|s| s.concept == c).map(|s| s.accuracy);
        let loss_total = active.iter().map(|&c| self.loss.weight(c) * mean_loss(c)).sum();
        let wall = self.config.log_wall_time.then(|| self.state.elapsed_s + self.started.elapsed().as_secs_f64());
        self.state.log.push(MetricsRecord {
            step: self.state.step,
            loss_total,
            loss_artist: loss_of(Concept::Artist),
            loss_album: loss_of(Concept::Album),
            loss_track: loss_of(Concept::Track),
            val_acc_artist: acc_of(Concept::Artist),
            val_acc_album: acc_of(Concept::Album),
            val_acc_track: acc_of(Concept::Track),
            wall_time_s: wall,
        });
        self.state.pending_loss = [0.0; 3];
        self.state.pending_steps = 0;
        if !scores.is_empty() {
            let val_loss: f64 = scores.iter().map(|s| self.loss.weight(s.concept) * s.loss).sum();
            self.optimizer.observe_validation(val_loss);
            let score = scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len() as f64;
            let better = match (self.state.best_val_score, self.state.best_val_loss) {
                (Some(b), Some(l)) => score > b || (score == b && val_loss < l),
                (Some(b), None) => score > b,
                (None, _) => true,
            };
            if better {
                self.state.best_val_score = Some(score);
                self.state.best_val_loss = Some(val_loss);
                self.state.best_step = Some(self.state.step);
                self.state.best_params = Some(self.encoder.params().to_vec());
            }
        }
        Ok(())
    }

    /// Run until `config.steps` updates have been applied.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_steps(&mut self, n: u64) -> Result<(), TrainError> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn state(&self) -> TrainState {
        let mut s = self.state.clone();
        s.params = self.encoder.params().to_vec();
        s.optimizer = self.optimizer.state.clone();
        s.rngs = self.streams.iter().map(|st| (st.concept, RngState::capture(&st.rng))).collect();
        if self.config.log_wall_time {
            s.elapsed_s += self.started.elapsed().as_secs_f64();
        }
        s
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.config().clone(),
            train: self.config.clone(),
            loss: self.loss.clone(),
            state: self.state(),
        }
    }

    /// Encoder with the best validation parameters (final ones if none).
    pub fn best_encoder(&self) -> Encoder {
        match &self.state.best_params {
            Some(p) => Encoder::from_params(self.encoder.config().clone(), p.clone()).expect("same config"),
            None => self.encoder.clone(),
        }
    }
}

/// Result of a full [`train`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn encoder(&self) -> Encoder {
        self.checkpoint.encoder().expect("valid checkpoint")
    }

    pub fn best_encoder(&self) -> Encoder {
        self.checkpoint.best_encoder().expect("valid checkpoint")
    }
}

pub fn train(
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
    loss: &LossConfig,
    data: TrainData<'_>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(encoder_config, config, loss, data)?;
    trainer.run()?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log: trainer.state.log.clone(),
        step_losses: trainer.step_losses,
    })
}
