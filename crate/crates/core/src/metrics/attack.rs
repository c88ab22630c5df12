use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::InstrumentedModel;
use crate::tensor::{Tape, Tensor};
use crate::training::{accuracy_of, evaluate_accuracy};

fn default_clip_max() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub eta: f64,
    #[serde(default)]
    pub clip_min: f64,
    #[serde(default = "default_clip_max")]
    pub clip_max: f64,
}

impl AttackConfig {
    pub fn new(eta: f64) -> Self {
        AttackConfig { eta, clip_min: 0.0, clip_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("attack eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::config("clip_min must be below clip_max"));
        }
        Ok(())
    }
}

const ATTACK_CHUNK: usize = 512;

/// Gradient of the mean cross-entropy with respect to each input value, in
/// eval mode.
pub fn input_gradient(model: &InstrumentedModel, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let logits = model.forward_eval(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    Ok(tape.grad_or_zeros(xv))
}

/// `clamp(x + eta * sign(grad), clip_min, clip_max)`; `eta = 0` returns `x`
/// unchanged.
pub fn fgsm_step(x: &Tensor, grad: &[f64], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if grad.len() != x.numel() {
        return Err(Error::shape(format!("gradient of length {} for {} inputs", grad.len(), x.numel())));
    }
    if cfg.eta == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            within_eta(v, (v + cfg.eta * s).clamp(cfg.clip_min, cfg.clip_max), cfg.eta)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Pulls `moved` toward `origin` by whole ulps until rounding no longer
/// pushes it more than `eta` away.
fn within_eta(origin: f64, mut moved: f64, eta: f64) -> f64 {
    while (moved - origin).abs() > eta {
        moved = if moved > origin { moved.next_down() } else { moved.next_up() };
    }
    moved
}

/// Untargeted one-step attack of every row of `x` against its own label.
pub fn fgsm(model: &InstrumentedModel, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if x.data().iter().any(|&v| v < cfg.clip_min || v > cfg.clip_max) {
        return Err(Error::domain("attack input outside the clip range"));
    }
    if cfg.eta == 0.0 {
        return Ok(x.clone());
    }
    let idx: Vec<usize> = (0..x.rows()).collect();
    let mut data = Vec::with_capacity(x.numel());
    for chunk in idx.chunks(ATTACK_CHUNK) {
        let xb = x.select_rows(chunk)?;
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let g = input_gradient(model, &xb, &yb)?;
        data.extend(fgsm_step(&xb, &g, cfg)?.into_data());
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Accuracy on FGSM-perturbed copies of the samples.
pub fn adversarial_accuracy(model: &InstrumentedModel, ds: &LabeledDataset, cfg: &AttackConfig) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    let x = ds.to_tensor()?;
    let adv = fgsm(model, &x, ds.labels(), cfg)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut logits = Vec::with_capacity(ds.len() * model.num_classes());
    for chunk in idx.chunks(ATTACK_CHUNK) {
        logits.extend_from_slice(model.predict(&adv.select_rows(chunk)?)?.data());
    }
    let logits = Tensor::new(vec![ds.len(), model.num_classes()], logits)?;
    Ok(accuracy_of(&logits, ds.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialPoint {
    pub eta: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub adversarial: Vec<AdversarialPoint>,
}

pub fn robustness_report(model: &InstrumentedModel, ds: &LabeledDataset, etas: &[f64]) -> Result<RobustnessReport> {
    let clean_accuracy = evaluate_accuracy(model, ds)?;
    let adversarial = etas
        .iter()
        .map(|&eta| {
            Ok(AdversarialPoint {
                eta,
                accuracy: adversarial_accuracy(model, ds, &AttackConfig::new(eta))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport { clean_accuracy, adversarial })
}
