use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNormState, Layer, LayerNormState, Mode, NormOutput, Param};
use super::{ArchName, ModelArch, NormKind, NormLayerKind};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Which normalized activations the instrumentation records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    /// `(x - mean) / sqrt(var + eps)`, before gamma and beta.
    #[default]
    PreAffine,
    PostAffine,
}

/// Feature vectors recorded at one normalization layer, stored row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CapturedFeatures {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl CapturedFeatures {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }
}

/// Per-scalar trainability flags over the model's flattened parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    flags: Vec<bool>,
}

impl UpdateMask {
    pub fn all(len: usize) -> Self {
        UpdateMask { flags: vec![true; len] }
    }

    pub fn none(len: usize) -> Self {
        UpdateMask { flags: vec![false; len] }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        UpdateMask { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn selected(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn intersect(&self, other: &UpdateMask) -> Result<UpdateMask> {
        if self.len() != other.len() {
            return Err(Error::contract("intersecting masks of different lengths"));
        }
        Ok(UpdateMask {
            flags: self.flags.iter().zip(&other.flags).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Where a parameter sits in the model and in the flattened vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// Result of a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Tape variable of each parameter (model order) that required a gradient.
    pub param_vars: Vec<Option<Var>>,
}

impl ForwardOutput {
    /// Gradients of every parameter after `tape.backward(..)`; `None` for
    /// parameters that did not require one.
    pub fn param_grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.param_vars
            .iter()
            .map(|v| v.map(|v| tape.grad_or_zeros(v)))
            .collect()
    }
}

/// Everything a forward pass produced besides the tape values.
struct RunTrace {
    output: ForwardOutput,
    batch_stats: Vec<(usize, BatchStats)>,
    captures: Vec<(usize, Var)>,
}

/// A layered classifier whose normalization layers can record the features
/// they produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentedModel {
    arch: ModelArch,
    layers: Vec<Layer>,
    #[serde(default)]
    capture_point: CapturePoint,
    #[serde(skip)]
    captured: BTreeMap<usize, CapturedFeatures>,
}

fn uniform_param(name: String, shape: Vec<usize>, fan_in: usize, r: &mut rng::Rng) -> Param {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
    Param::new(name, shape, data)
}

/// Fan-in-scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero
/// biases, `gamma = 1`, `beta = 0`. Identical `(arch, seed)` give
/// bit-identical parameters.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<InstrumentedModel> {
    arch.validate()?;
    let eps = arch.norm_epsilon;
    let mut layers = Vec::new();
    let mut r = rng::stream(seed, Purpose::Init, 0);
    match arch.name {
        ArchName::MlpBn | ArchName::MlpLn => {
            let mut width = arch.input_width();
            for (i, &h) in arch.widths.iter().enumerate() {
                let name = format!("block{}", i + 1);
                layers.push(Layer::Linear {
                    weight: uniform_param(format!("{name}.linear.weight"), vec![width, h], width, &mut r),
                    bias: Param::filled(format!("{name}.linear.bias"), vec![h], 0.0),
                });
                layers.push(if arch.name == ArchName::MlpBn {
                    Layer::BatchNorm(BatchNormState::new(&format!("{name}.bn"), h, arch.bn_momentum, eps)?)
                } else {
                    Layer::LayerNorm(LayerNormState::new(&format!("{name}.ln"), h, eps)?)
                });
                layers.push(Layer::Relu);
                width = h;
            }
            layers.push(Layer::Linear {
                weight: uniform_param("head.weight".into(), vec![width, arch.classes], width, &mut r),
                bias: Param::filled("head.bias", vec![arch.classes], 0.0),
            });
        }
        ArchName::CnnBn => {
            let mut channels = arch.input_shape[0];
            for (i, &o) in arch.widths.iter().enumerate() {
                let name = format!("block{}", i + 1);
                let fan_in = channels * 9;
                layers.push(Layer::Conv2d {
                    kernel: uniform_param(format!("{name}.conv.kernel"), vec![o, channels, 3, 3], fan_in, &mut r),
                    stride: 1,
                    padding: 1,
                });
                layers.push(Layer::BatchNorm(BatchNormState::new(
                    &format!("{name}.bn"),
                    o,
                    arch.bn_momentum,
                    eps,
                )?));
                layers.push(Layer::Relu);
                channels = o;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Linear {
                weight: uniform_param("head.weight".into(), vec![channels, arch.classes], channels, &mut r),
                bias: Param::filled("head.bias", vec![arch.classes], 0.0),
            });
        }
    }
    Ok(InstrumentedModel {
        arch: arch.clone(),
        layers,
        capture_point: CapturePoint::default(),
        captured: BTreeMap::new(),
    })
}

impl InstrumentedModel {
    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes
    }

    pub fn capture_point(&self) -> CapturePoint {
        self.capture_point
    }

    pub fn set_capture_point(&mut self, point: CapturePoint) {
        self.capture_point = point;
    }

    pub fn captured(&self) -> &BTreeMap<usize, CapturedFeatures> {
        &self.captured
    }

    pub fn take_captured(&mut self) -> BTreeMap<usize, CapturedFeatures> {
        std::mem::take(&mut self.captured)
    }

    pub fn clear_captured(&mut self) {
        self.captured.clear();
    }

    /// Normalization layers in forward order, numbered from 1.
    pub fn norm_layers(&self) -> Vec<NormLayerKind> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(_) => Some(NormKind::BatchNorm),
                Layer::LayerNorm(_) => Some(NormKind::LayerNorm),
                _ => None,
            })
            .enumerate()
            .map(|(i, kind)| NormLayerKind { kind, index: i + 1 })
            .collect()
    }

    pub fn num_norm_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_norm()).count()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                out.push(ParamSlot { layer: li, offset, len: p.len() });
                offset += p.len();
            }
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Overwrites every parameter from a flattened vector in model order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameter values, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Layer position of the `k`-th normalization layer (1-based); `k = L+1`
    /// maps to one past the last layer.
    pub fn norm_layer_position(&self, k: usize) -> Result<usize> {
        let l = self.num_norm_layers();
        if k == 0 || k > l + 1 {
            return Err(Error::domain(format!(
                "normalization layer index {k} outside 1..={}",
                l + 1
            )));
        }
        if k == l + 1 {
            return Ok(self.layers.len());
        }
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_norm())
            .nth(k - 1)
            .map(|(i, _)| i)
            .expect("k <= L"))
    }

    /// First layer of the block owning the `k`-th normalization layer (the
    /// linear map or convolution feeding it); `k = L+1` maps to one past the
    /// last layer.
    pub fn block_start(&self, k: usize) -> Result<usize> {
        let pos = self.norm_layer_position(k)?;
        if pos == self.layers.len() {
            return Ok(pos);
        }
        Ok(pos.saturating_sub(1))
    }

    fn input_shape_for(&self, x: &Tensor) -> Result<Vec<usize>> {
        let n = x.rows();
        let want: usize = self.arch.input_shape.iter().product();
        if x.shape().len() < 2 || x.row_len() != want {
            return Err(Error::shape(format!(
                "model expects samples of shape {:?}, got batch shape {:?}",
                self.arch.input_shape,
                x.shape()
            )));
        }
        let mut shape = vec![n];
        match self.arch.name {
            ArchName::CnnBn => shape.extend(&self.arch.input_shape),
            ArchName::MlpBn | ArchName::MlpLn => shape.push(want),
        }
        Ok(shape)
    }

    /// Runs layers `start..` on `x`. Layers before `train_from` use eval
    /// statistics even in train mode. Parameters whose index is set in
    /// `grad_params` enter the tape as gradient-requiring leaves.
    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        start: usize,
        train_from: usize,
        mode: Mode,
        grad_params: &[bool],
        capture: bool,
    ) -> Result<RunTrace> {
        let mut h = x;
        if start == 0 {
            let shape = self.input_shape_for(tape.value(x))?;
            if tape.value(x).shape() != shape.as_slice() {
                h = tape.reshape(x, shape)?;
            }
        }
        let mut param_vars = vec![None; grad_params.len()];
        let mut batch_stats = Vec::new();
        let mut captures = Vec::new();
        let mut pidx: usize = self.layers[..start.min(self.layers.len())]
            .iter()
            .map(|l| l.params().len())
            .sum();
        let mut norm_index = self.layers[..start.min(self.layers.len())]
            .iter()
            .filter(|l| l.is_norm())
            .count();
        let mut leaf = |tape: &mut Tape, p: &Param, pidx: &mut usize| -> Var {
            let rg = grad_params.get(*pidx).copied().unwrap_or(false);
            let v = tape.leaf(p.to_tensor(), rg);
            if rg {
                param_vars[*pidx] = Some(v);
            }
            *pidx += 1;
            v
        };
        for (li, layer) in self.layers.iter().enumerate().skip(start) {
            let layer_mode = if li < train_from { Mode::Eval } else { mode };
            h = match layer {
                Layer::Linear { weight, bias } => {
                    let w = leaf(tape, weight, &mut pidx);
                    let b = leaf(tape, bias, &mut pidx);
                    let m = tape.matmul(h, w)?;
                    tape.add_bias(m, b)?
                }
                Layer::Conv2d { kernel, stride, padding } => {
                    let k = leaf(tape, kernel, &mut pidx);
                    tape.conv2d(h, k, *stride, *padding)?
                }
                Layer::BatchNorm(state) => {
                    norm_index += 1;
                    let g = leaf(tape, &state.gamma, &mut pidx);
                    let b = leaf(tape, &state.beta, &mut pidx);
                    let spatial = tape.value(h).shape().len() == 4;
                    let dims = tape.value(h).shape().to_vec();
                    let rows = if spatial { tape.nchw_to_rows(h)? } else { h };
                    let (out, stats) = state.apply(tape, rows, g, b, layer_mode)?;
                    if let Some(stats) = stats {
                        batch_stats.push((li, stats));
                    }
                    if capture {
                        captures.push((norm_index, self.capture_var(out)));
                    }
                    if spatial {
                        tape.rows_to_nchw(out.output, [dims[0], dims[1], dims[2], dims[3]])?
                    } else {
                        out.output
                    }
                }
                Layer::LayerNorm(state) => {
                    norm_index += 1;
                    let g = leaf(tape, &state.gamma, &mut pidx);
                    let b = leaf(tape, &state.beta, &mut pidx);
                    let out = state.apply(tape, h, g, b)?;
                    if capture {
                        captures.push((norm_index, self.capture_var(out)));
                    }
                    out.output
                }
                Layer::Relu => tape.relu(h)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
            };
        }
        Ok(RunTrace {
            output: ForwardOutput { logits: h, param_vars },
            batch_stats,
            captures,
        })
    }

    fn capture_var(&self, out: NormOutput) -> Var {
        match self.capture_point {
            CapturePoint::PreAffine => out.normalized,
            CapturePoint::PostAffine => out.output,
        }
    }

    fn absorb(&mut self, tape: &Tape, trace: &RunTrace) {
        for (li, stats) in &trace.batch_stats {
            if let Layer::BatchNorm(state) = &mut self.layers[*li] {
                state.update_running(stats);
            }
        }
        for &(l, v) in &trace.captures {
            let t = tape.value(v);
            let entry = self.captured.entry(l).or_insert_with(|| CapturedFeatures {
                dim: t.row_len(),
                data: Vec::new(),
            });
            entry.data.extend_from_slice(t.data());
        }
    }

    /// Full forward pass. Every parameter requires a gradient when the tape
    /// is recording. With `capture`, each normalization layer appends its
    /// features to [`captured`](Self::captured); convolutional maps
    /// contribute one channel vector per spatial position.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, capture: bool) -> Result<ForwardOutput> {
        let grad_params = vec![tape.is_recording(); self.params().len()];
        self.forward_from(tape, x, 0, mode, &grad_params, capture)
    }

    /// Forward pass starting at layer `start`, whose input is `x`. Layers
    /// before `start` are treated as frozen. Train mode updates batch-norm
    /// running statistics.
    pub fn forward_from(
        &mut self,
        tape: &mut Tape,
        x: Var,
        start: usize,
        mode: Mode,
        grad_params: &[bool],
        capture: bool,
    ) -> Result<ForwardOutput> {
        let trace = self.run(tape, x, start, start, mode, grad_params, capture)?;
        self.absorb(tape, &trace);
        Ok(trace.output)
    }

    /// Eval-mode forward on `tape` with every parameter held constant, so
    /// only `x` can receive a gradient.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.run(tape, x, 0, 0, Mode::Eval, &[], false)?.output.logits)
    }

    /// Eval-mode logits on a tape-free pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let trace = self.run(&mut tape, xv, 0, 0, Mode::Eval, &[], false)?;
        Ok(tape.value(trace.output.logits).clone())
    }

    /// Eval-mode output of layers `..end` (the input to layer `end`).
    pub fn prefix_features(&self, x: &Tensor, end: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut trimmed = self.clone_structure(end);
        trimmed.captured.clear();
        let trace = trimmed.run(&mut tape, xv, 0, 0, Mode::Eval, &[], false)?;
        Ok(tape.value(trace.output.logits).clone())
    }

    fn clone_structure(&self, end: usize) -> InstrumentedModel {
        InstrumentedModel {
            arch: self.arch.clone(),
            layers: self.layers[..end.min(self.layers.len())].to_vec(),
            capture_point: self.capture_point,
            captured: BTreeMap::new(),
        }
    }
}

/// Trainability mask that excludes every parameter of the blocks before the
/// one owning the `k`-th normalization layer. `k = 1` trains everything,
/// `k = L+1` freezes everything including the head.
pub fn freeze_prefix(model: &InstrumentedModel, k: usize) -> Result<UpdateMask> {
    let boundary = model.block_start(k)?;
    let mut flags = vec![false; model.param_count()];
    for slot in model.param_slots() {
        if slot.layer >= boundary {
            flags[slot.offset..slot.offset + slot.len].iter_mut().for_each(|f| *f = true);
        }
    }
    Ok(UpdateMask::from_flags(flags))
}
