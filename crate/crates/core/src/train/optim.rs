use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is divided by this at every decay epoch.
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    /// Epochs at which the learning rate returns to `lr`.
    pub restart_epochs: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factor: 10.0,
            decay_epochs: Vec::new(),
            restart_epochs: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config(format!(
                "decay factor must be > 1, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: the base rate divided by `decay_factor`
/// once per decay epoch passed since the most recent restart.
pub fn schedule_lr(epoch: usize, config: &OptimizerConfig) -> f64 {
    let since = config.restart_epochs.iter().copied().filter(|&r| r <= epoch).max();
    let decays = config
        .decay_epochs
        .iter()
        .filter(|&&d| d <= epoch && since.is_none_or(|r| d > r))
        .count();
    config.lr / config.decay_factor.powi(decays as i32)
}

/// One Nesterov step on raw slices:
/// `g' = g + wd * theta; v = m * v + g'; theta -= lr * (g' + m * v)`.
pub fn nesterov_update(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *t;
        *v = momentum * *v + g;
        *t -= lr * (g + momentum * *v);
    }
}

/// Momentum buffers keyed by parameter name; parameters attached later
/// start with zero velocity.
#[derive(Debug, Clone, Default)]
pub struct Nesterov {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Nesterov {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// Applies one step to every trainable parameter. Weight decay applies
/// only to parameters whose role decays.
pub fn nesterov_step(net: &mut Network, state: &mut Nesterov, lr: f64, config: &OptimizerConfig) {
    net.for_each_param(|name, p| {
        if !p.trainable {
            return;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.len()]);
        let wd = if p.role.decays() { config.weight_decay } else { 0.0 };
        nesterov_update(p.value.data_mut(), p.grad.data(), v, lr, config.momentum, wd);
    });
}
