//! First-order optimisers over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluations without validation-loss improvement before decaying.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_learning_rate: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub best_val_loss: Option<f64>,
    pub bad_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let v = match config.name {
            OptimizerKind::Adam => vec![0.0; n_params],
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            state: OptimizerState {
                learning_rate: config.learning_rate,
                t: 0,
                m: vec![0.0; n_params],
                v,
                best_val_loss: None,
                bad_evals: 0,
            },
            config,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        let s = &mut self.state;
        s.t += 1;
        let lr = s.learning_rate;
        match c.name {
            OptimizerKind::Sgd => {
                for ((p, &g0), m) in params.iter_mut().zip(grad).zip(&mut s.m) {
                    let g = g0 + c.weight_decay * *p;
                    *m = c.momentum * *m + g;
                    *p -= lr * (g + c.momentum * *m);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(s.t as i32);
                let bc2 = 1.0 - c.beta2.powi(s.t as i32);
                for (((p, &g0), m), v) in params.iter_mut().zip(grad).zip(&mut s.m).zip(&mut s.v) {
                    let g = g0 + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
                }
            }
        }
    }

    /// Feed a validation loss; decays the learning rate on a plateau.
    /// Returns true when the rate changed.
    pub fn observe_validation(&mut self, val_loss: f64) -> bool {
        let s = &mut self.state;
        if s.best_val_loss.is_none_or(|best| val_loss < best) {
            s.best_val_loss = Some(val_loss);
            s.bad_evals = 0;
            return false;
        }
        s.bad_evals += 1;
        if self.config.plateau_patience > 0 && s.bad_evals >= self.config.plateau_patience {
            s.bad_evals = 0;
            let next = (s.learning_rate * self.config.plateau_factor).max(self.config.min_learning_rate);
            let changed = next != s.learning_rate;
            s.learning_rate = next;
            return changed;
        }
        false
    }
}
