//! Layers, desk-scale architectures and feature instrumentation.

mod layers;
mod model;

pub use layers::{
    batch_norm_forward, layer_norm_forward, BatchNormState, Layer, LayerNormState, Mode, Param,
    DEFAULT_BN_MOMENTUM, DEFAULT_NORM_EPSILON,
};
pub use model::{
    freeze_prefix, init_params, CapturePoint, CapturedFeatures, ForwardOutput, InstrumentedModel, ParamSlot,
    UpdateMask,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    /// `[linear -> batch norm -> relu] x widths -> linear`.
    MlpBn,
    /// `[conv3x3 -> batch norm -> relu] x widths -> global average pool -> linear`.
    CnnBn,
    /// As `mlp_bn` with layer norm.
    MlpLn,
}

impl ArchName {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::MlpBn => "mlp_bn",
            ArchName::CnnBn => "cnn_bn",
            ArchName::MlpLn => "mlp_ln",
        }
    }
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub name: ArchName,
    /// Shape of one sample: `[d]` for the MLPs (any shape is flattened),
    /// `[c, h, w]` for the CNN.
    pub input_shape: Vec<usize>,
    /// Hidden widths (MLP) or channel counts (CNN); one normalization layer each.
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_eps")]
    pub norm_epsilon: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

impl ModelArch {
    pub fn new(name: ArchName, input_shape: Vec<usize>, widths: Vec<usize>, classes: usize) -> Self {
        ModelArch {
            name,
            input_shape,
            widths,
            classes,
            norm_epsilon: DEFAULT_NORM_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::config(format!(
                "architecture needs at least 3 normalization layers, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("zero width or input dimension"));
        }
        if self.input_shape.is_empty() {
            return Err(Error::config("empty input shape"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least 2 classes are required"));
        }
        if self.name == ArchName::MlpLn && self.widths.iter().any(|&w| w < 2) {
            return Err(Error::config("layer norm needs widths >= 2"));
        }
        if self.name == ArchName::CnnBn && self.input_shape.len() != 3 {
            return Err(Error::config("cnn_bn expects input_shape [c, h, w]"));
        }
        if !(self.norm_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("norm_epsilon must be > 0 and bn_momentum in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
}

/// A normalization layer and its 1-based ordinal among the model's norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormLayerKind {
    pub kind: NormKind,
    pub index: usize,
}
