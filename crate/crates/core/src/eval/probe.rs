//! Transfer linear probe: frozen song-level embeddings into an L2-regularised
//! multinomial logistic regression.
//!
//! The regularisation strength is picked from a log grid on a stratified
//! validation fold of the training items, then the classifier is refit on
//! all training items. Inputs are not standardised, so accuracy is
//! invariant to any orthogonal rotation of the embedding space.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::features::{load_features, FeatureMatrix};
use crate::model::{embed_song, SegmentEncoder};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub feature_ref: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeDataset {
    pub items: Vec<ProbeItem>,
    /// Sorted label vocabulary.
    pub classes: Vec<String>,
}

impl ProbeDataset {
    pub fn from_items(items: Vec<ProbeItem>) -> Self {
        let classes = items.iter().map(|i| i.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        ProbeDataset { items, classes }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Read a `feature_ref,label` CSV.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |e: csv::Error| EvalError::ProbeFile { path: path.to_path_buf(), message: e.to_string() };
        let mut reader = csv::Reader::from_path(path).map_err(err)?;
        let items = reader.deserialize::<ProbeItem>().collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(ProbeDataset::from_items(items))
    }

    /// Load every item's feature file, resolving refs against `root`.
    pub fn load_features(&self, root: &Path) -> Result<Vec<FeatureMatrix>, EvalError> {
        self.items.iter().map(|i| Ok(load_features(&root.join(&i.feature_ref))?)).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.items.iter().map(|i| i.label.clone()).collect()
    }
}

pub fn write_probe_csv(path: &Path, set: &ProbeDataset) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for item in &set.items {
        w.serialize(item)?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Candidate L2 strengths.
    pub lambdas: Vec<f64>,
    pub val_fraction: f64,
    pub max_iter: usize,
    /// Stop when the gradient's max-norm falls below this.
    pub tolerance: f64,
    /// Window stride for song embeddings; 0 means the segment length.
    pub hop: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lambdas: (-4..=2).map(|e| 10f64.powi(e)).collect(),
            val_fraction: 0.25,
            max_iter: 500,
            tolerance: 1e-7,
            hop: 0,
            seed: 0,
        }
    }
}

/// Labelled features for one side of a probe.
#[derive(Clone, Copy)]
pub struct ProbeSet<'a> {
    pub dataset: &'a ProbeDataset,
    pub features: &'a [FeatureMatrix],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub predictions: Vec<String>,
}

/// Softmax classifier, weights `[class][dim]` followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    pub n_classes: usize,
    pub dim: usize,
    pub theta: Vec<f64>,
}

fn log_softmax_row(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl LogisticRegression {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let (c, d) = (self.n_classes, self.dim);
        for k in 0..c {
            let w = &self.theta[k * d..(k + 1) * d];
            out[k] = self.theta[c * d + k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.n_classes];
        self.logits(x, &mut z);
        // first maximum wins, so the prediction is deterministic
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }

    /// Mean negative log-likelihood plus `lambda/2 · |W|²` and its gradient.
    fn objective(&self, xs: &[Vec<f64>], ys: &[usize], lambda: f64, grad: &mut [f64]) -> f64 {
        let (c, d) = (self.n_classes, self.dim);
        let inv_n = 1.0 / xs.len() as f64;
        grad.fill(0.0);
        let mut z = vec![0.0; c];
        let mut f = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            self.logits(x, &mut z);
            log_softmax_row(&mut z);
            f -= z[y] * inv_n;
            for k in 0..c {
                let r = (z[k].exp() - if k == y { 1.0 } else { 0.0 }) * inv_n;
                grad[c * d + k] += r;
                let g = &mut grad[k * d..(k + 1) * d];
                g.iter_mut().zip(x).for_each(|(g, xv)| *g += r * xv);
            }
        }
        for i in 0..c * d {
            f += 0.5 * lambda * self.theta[i] * self.theta[i];
            grad[i] += lambda * self.theta[i];
        }
        f
    }

    pub fn fit(xs: &[Vec<f64>], ys: &[usize], n_classes: usize, lambda: f64, max_iter: usize, tol: f64) -> Self {
        let dim = xs.first().map_or(0, |x| x.len());
        let mut model = LogisticRegression { n_classes, dim, theta: vec![0.0; n_classes * (dim + 1)] };
        lbfgs(&mut model, xs, ys, lambda, max_iter, tol);
        model
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with backtracking Armijo line search.
fn lbfgs(model: &mut LogisticRegression, xs: &[Vec<f64>], ys: &[usize], lambda: f64, max_iter: usize, tol: f64) {
    const MEMORY: usize = 10;
    let n = model.theta.len();
    let mut g = vec![0.0; n];
    let mut f = model.objective(xs, ys, lambda, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < tol {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let old = model.theta.clone();
        let mut step = if hist.is_empty() { 1.0 / g.iter().map(|v| v.abs()).sum::<f64>().max(1.0) } else { 1.0 };
        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..60 {
            for i in 0..n {
                model.theta[i] = old[i] + step * dir[i];
            }
            f_new = model.objective(xs, ys, lambda, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            model.theta = old;
            break;
        }
        let s: Vec<f64> = (0..n).map(|i| model.theta[i] - old[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        let done = (f - f_new).abs() <= 1e-14 * f.abs().max(1.0);
        f = f_new;
        std::mem::swap(&mut g, &mut g_new);
        if done {
            break;
        }
    }
}

fn accuracy(model: &LogisticRegression, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let hits = xs.iter().zip(ys).filter(|(x, &y)| model.predict(x) == y).count();
    hits as f64 / xs.len() as f64
}

/// Seeded stratified split of training indices into (fit, validation).
fn stratified_fold(ys: &[usize], n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::substream(seed, "probe/fold");
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        idx.shuffle(&mut r);
        let k =
            if idx.len() >= 2 { ((idx.len() as f64 * fraction).floor() as usize).clamp(1, idx.len() - 1) } else { 0 };
        val.extend_from_slice(&idx[..k]);
        fit.extend_from_slice(&idx[k..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Fit and score a probe on precomputed vectors.
pub fn probe_vectors(
    train_x: &[Vec<f64>],
    train_labels: &[String],
    test_x: &[Vec<f64>],
    test_labels: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeResult, EvalError> {
    for (what, xs, ls) in [("train", train_x, train_labels), ("test", test_x, test_labels)] {
        if xs.len() != ls.len() {
            return Err(EvalError::LengthMismatch { what, expected: ls.len(), got: xs.len() });
        }
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(EvalError::EmptyProbeSet);
    }
    let vocab: BTreeMap<&str, usize> = train_labels
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    if let Some(l) = test_labels.iter().find(|l| !vocab.contains_key(l.as_str())) {
        return Err(EvalError::ClassMissingFromTrain(l.clone()));
    }
    let n_classes = vocab.len();
    if n_classes < 2 {
        return Err(EvalError::TooFewClasses(n_classes));
    }
    let ys: Vec<usize> = train_labels.iter().map(|l| vocab[l.as_str()]).collect();
    let test_ys: Vec<usize> = test_labels.iter().map(|l| vocab[l.as_str()]).collect();

    let (fit, val) = stratified_fold(&ys, n_classes, cfg.val_fraction, cfg.seed);
    let lambda = if val.is_empty() || cfg.lambdas.len() == 1 {
        cfg.lambdas[cfg.lambdas.len() / 2]
    } else {
        let pick = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (ix.iter().map(|&i| train_x[i].clone()).collect(), ix.iter().map(|&i| ys[i]).collect())
        };
        let (fx, fy) = pick(&fit);
        let (vx, vy) = pick(&val);
        let mut best = (f64::NEG_INFINITY, cfg.lambdas[0]);
        for &lambda in &cfg.lambdas {
            let m = LogisticRegression::fit(&fx, &fy, n_classes, lambda, cfg.max_iter, cfg.tolerance);
            let acc = accuracy(&m, &vx, &vy);
            // ties go to the stronger regulariser
            if acc > best.0 || (acc == best.0 && lambda > best.1) {
                best = (acc, lambda);
            }
        }
        best.1
    };
    let model = LogisticRegression::fit(train_x, &ys, n_classes, lambda, cfg.max_iter, cfg.tolerance);
    let names: Vec<&str> = vocab.keys().copied().collect();
    let predictions: Vec<String> = test_x.iter().map(|x| names[model.predict(x)].to_string()).collect();
    Ok(ProbeResult {
        accuracy: accuracy(&model, test_x, &test_ys),
        lambda,
        n_train: train_x.len(),
        n_test: test_x.len(),
        n_classes,
        predictions,
    })
}

fn check_sets(train: ProbeSet<'_>, test: ProbeSet<'_>) -> Result<(), EvalError> {
    for (what, s) in [("probe train features", train), ("probe test features", test)] {
        if s.features.len() != s.dataset.len() {
            return Err(EvalError::LengthMismatch { what, expected: s.dataset.len(), got: s.features.len() });
        }
    }
    let train_refs: BTreeSet<&str> = train.dataset.items.iter().map(|i| i.feature_ref.as_str()).collect();
    if let Some(i) = test.dataset.items.iter().find(|i| train_refs.contains(i.feature_ref.as_str())) {
        return Err(EvalError::OverlappingSets(i.feature_ref.clone()));
    }
    Ok(())
}

/// Probe on song-level embeddings: the renormalised mean of window
/// embeddings at stride `cfg.hop`.
pub fn transfer_probe(
    encoder: &(impl SegmentEncoder + ?Sized),
    train: ProbeSet<'_>,
    test: ProbeSet<'_>,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, EvalError> {
    check_sets(train, test)?;
    let hop = if cfg.hop == 0 { encoder.input_shape().0 } else { cfg.hop };
    let embed = |fs: &[FeatureMatrix]| -> Result<Vec<Vec<f64>>, EvalError> {
        fs.iter().map(|m| Ok(embed_song(encoder, m, hop)?.into_vec())).collect()
    };
    probe_vectors(&embed(train.features)?, &train.dataset.labels(), &embed(test.features)?, &test.dataset.labels(), cfg)
}

/// Probe directly on each item's mean feature frame.
pub fn baseline_probe(train: ProbeSet<'_>, test: ProbeSet<'_>, cfg: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    check_sets(train, test)?;
    let means = |fs: &[FeatureMatrix]| fs.iter().map(|m| m.frame_mean()).collect::<Vec<_>>();
    probe_vectors(&means(train.features), &train.dataset.labels(), &means(test.features), &test.dataset.labels(), cfg)
}
