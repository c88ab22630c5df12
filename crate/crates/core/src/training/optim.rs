use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_epsilon() -> f64 {
    1e-8
}

/// Optimizer hyperparameters. For Adam, `momentum` is the first-moment
/// decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            weight_decay,
            beta2: default_beta2(),
            adam_epsilon: default_adam_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: beta1,
            ..OptimizerConfig::sgd(learning_rate, 0.0, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.kind == OptimizerKind::Adam {
            if !(0.0..1.0).contains(&self.beta2) {
                return Err(Error::config("beta2 must be in [0, 1)"));
            }
            if !(self.adam_epsilon > 0.0) {
                return Err(Error::config("adam_epsilon must be > 0"));
            }
        }
        Ok(())
    }
}

fn check_lengths(params: &[f64], grads: &[f64], state: &[&[f64]], mask: Option<&[bool]>) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.iter().any(|s| s.len() != n) || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::contract(format!(
            "optimizer buffers disagree: {n} params, {} grads",
            grads.len()
        )));
    }
    Ok(())
}

/// SGD with momentum and coupled weight decay:
/// `g' = g + wd*theta`, `v <- mu*v + g'`, `theta <- theta - lr*v`.
/// Entries whose mask flag is false are left untouched, velocity included.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    mask: Option<&[bool]>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_lengths(params, grads, &[velocity], mask)?;
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i] + cfg.weight_decay * params[i];
        velocity[i] = cfg.momentum * velocity[i] + g;
        params[i] -= cfg.learning_rate * velocity[i];
    }
    Ok(())
}

/// Bias-corrected Adam with the weight decay added to the gradient before
/// the moment updates. `t` is the 1-based step index.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    mask: Option<&[bool]>,
    cfg: &OptimizerConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("adam step index starts at 1"));
    }
    check_lengths(params, grads, &[first, second], mask)?;
    let (b1, b2) = (cfg.momentum, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..params.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i] + cfg.weight_decay * params[i];
        first[i] = b1 * first[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
    }
    Ok(())
}

/// Per-scalar optimizer buffers. SGD uses `first` as its velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        config.validate()?;
        let second = match config.kind {
            OptimizerKind::Adam => vec![0.0; len],
            OptimizerKind::Sgd => Vec::new(),
        };
        Ok(Optimizer {
            config,
            state: OptimizerState { step: 0, first: vec![0.0; len], second },
        })
    }

    pub fn from_state(config: OptimizerConfig, state: OptimizerState) -> Result<Self> {
        config.validate()?;
        let expected_second = match config.kind {
            OptimizerKind::Adam => state.first.len(),
            OptimizerKind::Sgd => 0,
        };
        if state.second.len() != expected_second {
            return Err(Error::contract("optimizer state does not match its kind"));
        }
        Ok(Optimizer { config, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
        self.state.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, &mut self.state.first, mask, &self.config),
            OptimizerKind::Adam => adam_step(
                params,
                grads,
                &mut self.state.first,
                &mut self.state.second,
                mask,
                &self.config,
                self.state.step,
            ),
        }
    }
}
