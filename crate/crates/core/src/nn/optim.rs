use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Parameters;
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Utterances (or sentences) whose gradients are summed before one update.
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
        }
    }
}

/// SGD or Adam with per-parameter moments. Parameters whose names start with a frozen
/// prefix are never updated.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub frozen: Vec<String>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            frozen: Vec::new(),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, params: &mut Parameters) -> Result<()> {
        for (name, t) in params.iter() {
            if !self.is_frozen(name) && t.grad.is_none() {
                return Err(AsrError::Autodiff(format!("parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let cfg = self.config.clone();
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            if self.is_frozen(name) {
                if let Some(g) = &mut t.grad {
                    g.fill(0.0);
                }
                continue;
            }
            let grad = t.grad.as_mut().expect("checked above");
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in t.values.iter_mut().zip(grad.iter()) {
                        *p -= cfg.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    for (((p, g), m), v) in t.values.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}
