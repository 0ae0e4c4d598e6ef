//! First-order optimizers over named parameter tensors: Adam with bias
//! correction and per-epoch exponential learning-rate decay, and classical
//! SGD with momentum.

use crate::model::Parameters;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    Invalid(String),
    #[error("gradient shape mismatch for {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    #[serde(rename_all = "kebab-case")]
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_decay")]
        per_epoch_decay: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    #[serde(rename_all = "kebab-case")]
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.89
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            per_epoch_decay: default_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        match self {
            OptimizerConfig::Adam { lr, per_epoch_decay, beta1, beta2, eps } => {
                if !(*lr > 0.0) {
                    return Err(OptimError::Invalid(format!("lr must be > 0, got {lr}")));
                }
                if !(*per_epoch_decay > 0.0 && *per_epoch_decay <= 1.0) {
                    return Err(OptimError::Invalid(format!(
                        "per-epoch decay must be in (0,1], got {per_epoch_decay}"
                    )));
                }
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) {
                    return Err(OptimError::Invalid("betas must be in [0,1)".into()));
                }
                if !(*eps > 0.0) {
                    return Err(OptimError::Invalid(format!("eps must be > 0, got {eps}")));
                }
            }
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                if !(*lr > 0.0) {
                    return Err(OptimError::Invalid(format!("lr must be > 0, got {lr}")));
                }
                if !(0.0..1.0).contains(momentum) {
                    return Err(OptimError::Invalid(format!("momentum must be in [0,1), got {momentum}")));
                }
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state bound to one parameter set's shapes.
pub struct Optimizer {
    config: OptimizerConfig,
    /// Adam first moments / SGD velocity, per parameter tensor.
    m: Vec<Tensor>,
    /// Adam second moments (unused for SGD).
    v: Vec<Tensor>,
    /// Adam step counter for bias correction.
    t: u64,
    epoch: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &Parameters) -> Result<Self, OptimError> {
        config.validate()?;
        let m = params.entries().iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        let v = params.entries().iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        Ok(Self { config, m, v, t: 0, epoch: 0 })
    }

    /// Announces the current epoch; Adam's learning rate is lr·decay^epoch.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    /// Learning rate in effect for the current epoch.
    pub fn effective_lr(&self) -> f64 {
        match &self.config {
            OptimizerConfig::Adam { lr, per_epoch_decay, .. } => {
                lr * per_epoch_decay.powi(self.epoch as i32)
            }
            OptimizerConfig::SgdMomentum { lr, .. } => *lr,
        }
    }

    /// One update over all parameter tensors; `grads` aligns with the
    /// parameter entry order (missing gradients are treated as zero).
    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Invalid(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let lr = self.effective_lr();
        match self.config {
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (name, w)) in params.entries_mut().iter_mut().enumerate() {
                    if grads[i].dims() != w.dims() {
                        return Err(OptimError::ShapeMismatch(name.clone()));
                    }
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let g = grads[i].data();
                    for ((w, (m, v)), &g) in
                        w.data_mut().iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g)
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::SgdMomentum { momentum, .. } => {
                for (i, (name, w)) in params.entries_mut().iter_mut().enumerate() {
                    if grads[i].dims() != w.dims() {
                        return Err(OptimError::ShapeMismatch(name.clone()));
                    }
                    let vel = self.m[i].data_mut();
                    let g = grads[i].data();
                    for ((w, vel), &g) in w.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                        *vel = momentum * *vel + g;
                        *w -= lr * *vel;
                    }
                }
            }
        }
        Ok(())
    }
}
