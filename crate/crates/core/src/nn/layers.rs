use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { name: name.into(), shape, data }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone())
    }
}

pub const DEFAULT_NORM_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Output of one normalization layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormOutput {
    /// Pre-affine normalized features.
    pub normalized: Var,
    /// After `gamma * x + beta`.
    pub output: Var,
}

impl BatchNormState {
    pub fn new(name: &str, features: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::domain("batch norm epsilon must be > 0"));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::domain("batch norm momentum must be in (0, 1]"));
        }
        Ok(BatchNormState {
            gamma: Param::filled(format!("{name}.gamma"), vec![features], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![features], 0.0),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            epsilon,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x[n,d]`. In train mode the batch statistics are returned
    /// so that the caller can fold them into the running estimates.
    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
    ) -> Result<(NormOutput, Option<BatchStats>)> {
        let (normalized, stats) = match mode {
            Mode::Train => {
                let (v, s) = tape.batch_normalize(x, self.epsilon)?;
                (v, Some(s))
            }
            Mode::Eval => (
                tape.stats_normalize(x, &self.running_mean, &self.running_var, self.epsilon)?,
                None,
            ),
        };
        let output = tape.column_affine(normalized, gamma, beta)?;
        Ok((NormOutput { normalized, output }, stats))
    }

    /// `running <- (1 - momentum) * running + momentum * batch`, biased variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormState {
    pub gamma: Param,
    pub beta: Param,
    pub epsilon: f64,
}

impl LayerNormState {
    pub fn new(name: &str, features: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::domain("layer norm epsilon must be > 0"));
        }
        Ok(LayerNormState {
            gamma: Param::filled(format!("{name}.gamma"), vec![features], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![features], 0.0),
            epsilon,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<NormOutput> {
        let normalized = tape.layer_normalize(x, self.epsilon)?;
        let output = tape.column_affine(normalized, gamma, beta)?;
        Ok(NormOutput { normalized, output })
    }
}

/// Batch normalization of `x[n,d]` with trainable `gamma`/`beta` leaves.
/// Train mode updates the running statistics.
pub fn batch_norm_forward(state: &mut BatchNormState, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
    let gamma = tape.leaf(state.gamma.to_tensor(), true);
    let beta = tape.leaf(state.beta.to_tensor(), true);
    let (out, stats) = state.apply(tape, x, gamma, beta, mode)?;
    if let Some(stats) = stats {
        state.update_running(&stats);
    }
    Ok(out.output)
}

/// Layer normalization of every row of `x[n,d]`.
pub fn layer_norm_forward(gamma: &[f64], beta: &[f64], tape: &mut Tape, x: Var, epsilon: f64) -> Result<Var> {
    let d = gamma.len();
    let state = LayerNormState {
        gamma: Param::new("gamma", vec![d], gamma.to_vec()),
        beta: Param::new("beta", vec![beta.len()], beta.to_vec()),
        epsilon,
    };
    let g = tape.leaf(state.gamma.to_tensor(), true);
    let b = tape.leaf(state.beta.to_tensor(), true);
    Ok(state.apply(tape, x, g, b)?.output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `x[n,in] * weight[in,out] + bias[out]`.
    Linear { weight: Param, bias: Param },
    /// Bias-free convolution; a normalization layer always follows.
    Conv2d { kernel: Param, stride: usize, padding: usize },
    BatchNorm(BatchNormState),
    LayerNorm(LayerNormState),
    Relu,
    GlobalAvgPool,
}

impl Layer {
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, .. } => vec![kernel],
            Layer::BatchNorm(s) => vec![&s.gamma, &s.beta],
            Layer::LayerNorm(s) => vec![&s.gamma, &s.beta],
            Layer::Relu | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, .. } => vec![kernel],
            Layer::BatchNorm(s) => vec![&mut s.gamma, &mut s.beta],
            Layer::LayerNorm(s) => vec![&mut s.gamma, &mut s.beta],
            Layer::Relu | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, Layer::BatchNorm(_) | Layer::LayerNorm(_))
    }
}
