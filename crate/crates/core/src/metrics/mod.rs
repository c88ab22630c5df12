//! Per-class feature variance, fairness gaps, FGSM robustness and the
//! gap-robustness rank correlation.

mod attack;
mod rank;

pub use attack::{adversarial_accuracy, fgsm, fgsm_step, input_gradient, robustness_report, AttackConfig, AdversarialPoint, RobustnessReport};
pub use rank::{average_ranks, fairness_robustness_correlation, spearman, Correlation};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{CapturedFeatures, InstrumentedModel};
use crate::tensor::Tape;

/// Divisor of the per-dimension variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDivisor {
    /// `N`, matching the normalization layers.
    #[default]
    Population,
    /// `N - 1`.
    Sample,
}

/// Mean over dimensions of the per-dimension variance of `n` row-major
/// vectors of length `dim`, i.e. the covariance trace divided by `dim`.
pub fn class_variance(data: &[f64], dim: usize) -> Result<f64> {
    class_variance_with(data, dim, VarianceDivisor::Population)
}

pub fn class_variance_with(data: &[f64], dim: usize, divisor: VarianceDivisor) -> Result<f64> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::shape(format!("{} values do not form vectors of length {dim}", data.len())));
    }
    let n = data.len() / dim;
    if n < 2 {
        return Err(Error::domain(format!("class variance needs at least 2 vectors, got {n}")));
    }
    let denom = match divisor {
        VarianceDivisor::Population => n as f64,
        VarianceDivisor::Sample => (n - 1) as f64,
    };
    let mut total = 0.0;
    for j in 0..dim {
        // shifting by the first value makes identical vectors exactly zero
        let origin = data[j];
        let mean = (0..n).map(|i| data[i * dim + j] - origin).sum::<f64>() / n as f64;
        let ss: f64 = (0..n).map(|i| (data[i * dim + j] - origin - mean).powi(2)).sum();
        total += ss / denom;
    }
    Ok(total / dim as f64)
}

/// `max - min` over the classes' variances.
pub fn fairness_gap(sigmas: &BTreeMap<usize, f64>) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(Error::domain("fairness gap of no classes"));
    }
    let max = sigmas.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sigmas.values().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// 1-based normalization layer index.
    pub layer: usize,
    pub sigma: BTreeMap<usize, f64>,
    pub gap: f64,
}

/// Per-class variances and gaps at every normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessProfile {
    pub split: String,
    pub layers: Vec<LayerProfile>,
}

impl FairnessProfile {
    pub fn gaps(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.gap).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.layers.first().map(|l| l.sigma.keys().copied().collect()).unwrap_or_default()
    }
}

/// Eval-mode features of `ds` at every normalization layer.
pub fn capture_features(model: &InstrumentedModel, ds: &LabeledDataset) -> Result<BTreeMap<usize, CapturedFeatures>> {
    let mut m = model.clone();
    m.clear_captured();
    let mut tape = Tape::inference();
    let x = tape.constant(ds.to_tensor()?);
    m.forward(&mut tape, x, crate::nn::Mode::Eval, true)?;
    Ok(m.take_captured())
}

/// Fairness profile of `model` over the listed classes of `eval_ds`, one
/// capture-enabled eval forward per class.
pub fn fairness_profile(
    model: &InstrumentedModel,
    eval_ds: &LabeledDataset,
    classes: &[usize],
    split: &str,
    divisor: VarianceDivisor,
) -> Result<FairnessProfile> {
    if classes.is_empty() {
        return Err(Error::domain("fairness profile needs at least one class"));
    }
    let num_layers = model.num_norm_layers();
    let mut sigma: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); num_layers];
    for &c in classes {
        let idx = eval_ds.indices_of_class(c);
        if idx.len() < 2 {
            return Err(Error::domain(format!(
                "class {c} has {} evaluation samples; at least 2 are needed",
                idx.len()
            )));
        }
        let feats = capture_features(model, &eval_ds.subset(&idx))?;
        for (l, f) in feats {
            sigma[l - 1].insert(c, class_variance_with(&f.data, f.dim, divisor)?);
        }
    }
    let layers = sigma
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(LayerProfile {
                layer: i + 1,
                gap: fairness_gap(&s)?,
                sigma: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FairnessProfile { split: split.to_string(), layers })
}

/// Per-layer `|gap_u - gap_ref|` and its maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
}

pub fn fairness_preservation(profile: &FairnessProfile, reference: &FairnessProfile) -> Result<Preservation> {
    if profile.layers.len() != reference.layers.len() {
        return Err(Error::contract(format!(
            "profiles have {} and {} layers",
            profile.layers.len(),
            reference.layers.len()
        )));
    }
    if profile.classes() != reference.classes() {
        return Err(Error::contract("profiles cover different classes"));
    }
    let deviations: Vec<f64> = profile
        .layers
        .iter()
        .zip(&reference.layers)
        .map(|(a, b)| (a.gap - b.gap).abs())
        .collect();
    let max_deviation = deviations.iter().copied().fold(0.0, f64::max);
    Ok(Preservation { deviations, max_deviation })
}
