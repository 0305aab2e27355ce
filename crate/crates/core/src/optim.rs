//! Adam with bias-corrected moment estimates, and the batch-max reductions
//! shared by the trainers.

use crate::error::{Error, Result};
use crate::neural::tape::{Tape, Var};

/// How a batch of pointwise losses is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxMode {
    /// Largest entry, with the subgradient at the argmax.
    Hard,
    /// `tau log sum exp(loss / tau)`.
    LogSumExp { temperature: f64 },
}

impl MaxMode {
    pub fn parse(name: &str, temperature: f64) -> Result<Self> {
        match name {
            "hard" => Ok(MaxMode::Hard),
            "lse" | "log-sum-exp" => {
                if !(temperature > 0.0) {
                    return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
                }
                Ok(MaxMode::LogSumExp { temperature })
            }
            other => Err(Error::Config(format!("unknown max mode {other:?} (expected hard or lse)"))),
        }
    }

    pub fn describe(self) -> String {
        match self {
            MaxMode::Hard => "hard".into(),
            MaxMode::LogSumExp { temperature } => format!("lse({temperature})"),
        }
    }

    pub fn reduce(self, tape: &mut Tape, losses: Var) -> Var {
        match self {
            MaxMode::Hard => tape.max_all(losses),
            MaxMode::LogSumExp { temperature } => tape.log_sum_exp(losses, temperature),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, size: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; size],
            v: vec![0.0; size],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` along `-grad`, scaled by `lr_factor`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr_factor: f64) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.steps += 1;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let lr = learning_rate * lr_factor;
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}
