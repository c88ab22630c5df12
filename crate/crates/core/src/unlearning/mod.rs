//! Exact unlearning by retraining and five approximate methods that start
//! from the original model.

mod methods;

pub use methods::{
    bs_targets, bs_unlearn, cf_unlearn, redraw_label, retrain, rl_unlearn, run_method, salun_unlearn, saliency,
    scrub_unlearn, top_fraction_mask, UnlearnContext,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::InstrumentedModel;
use crate::training::{OptimizerConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Retrain,
    Cf,
    Rl,
    Bs,
    Salun,
    Scrub,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Retrain,
        MethodKind::Cf,
        MethodKind::Rl,
        MethodKind::Bs,
        MethodKind::Salun,
        MethodKind::Scrub,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Retrain => "retrain",
            MethodKind::Cf => "cf",
            MethodKind::Rl => "rl",
            MethodKind::Bs => "bs",
            MethodKind::Salun => "salun",
            MethodKind::Scrub => "scrub",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown unlearning method `{s}`")))
    }
}

fn default_bs_eta() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsConfig {
    /// FGSM magnitude used to find the adversarial target labels.
    #[serde(default = "default_bs_eta")]
    pub eta: f64,
    /// Compute targets once at the original model instead of every epoch.
    #[serde(default)]
    pub static_targets: bool,
}

impl Default for BsConfig {
    fn default() -> Self {
        BsConfig { eta: default_bs_eta(), static_targets: false }
    }
}

fn one() -> f64 {
    1.0
}

fn default_max_steps() -> usize {
    2
}

fn default_min_steps() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrubConfig {
    /// Forget-set ascent steps per epoch.
    #[serde(default = "default_max_steps")]
    pub max_steps_per_epoch: usize,
    /// Retain-set descent steps per epoch.
    #[serde(default = "default_min_steps")]
    pub min_steps_per_epoch: usize,
    #[serde(default = "one")]
    pub distill_temperature: f64,
    #[serde(default = "one")]
    pub retain_ce_weight: f64,
}

impl Default for ScrubConfig {
    fn default() -> Self {
        ScrubConfig {
            max_steps_per_epoch: default_max_steps(),
            min_steps_per_epoch: default_min_steps(),
            distill_temperature: 1.0,
            retain_ce_weight: 1.0,
        }
    }
}

impl ScrubConfig {
    /// Checks the loss knobs. Zero steps in both phases are allowed here and
    /// rejected by [`MethodSpec::validate`].
    pub fn validate_losses(&self) -> Result<()> {
        if !(self.distill_temperature > 0.0 && self.distill_temperature.is_finite()) {
            return Err(Error::config("distill_temperature must be > 0"));
        }
        if !(self.retain_ce_weight >= 0.0 && self.retain_ce_weight.is_finite()) {
            return Err(Error::config("retain_ce_weight must be >= 0"));
        }
        Ok(())
    }
}

fn default_fraction() -> f64 {
    0.5
}

/// One unlearning method with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub freeze_k: Option<usize>,
    /// Share of trainable scalars SALUN updates.
    #[serde(default = "default_fraction")]
    pub salun_fraction: f64,
    #[serde(default)]
    pub bs: BsConfig,
    #[serde(default)]
    pub scrub: ScrubConfig,
}

impl MethodSpec {
    pub fn new(kind: MethodKind, epochs: usize, batch_size: usize, optimizer: OptimizerConfig) -> Self {
        MethodSpec {
            kind,
            epochs,
            batch_size,
            optimizer,
            freeze_k: None,
            salun_fraction: default_fraction(),
            bs: BsConfig::default(),
            scrub: ScrubConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config(format!("{}: batch_size must be >= 1", self.kind)));
        }
        match self.kind {
            MethodKind::Salun if !(self.salun_fraction > 0.0 && self.salun_fraction <= 1.0) => {
                return Err(Error::config("salun_fraction must be in (0, 1]"));
            }
            MethodKind::Bs if !(self.bs.eta >= 0.0 && self.bs.eta.is_finite()) => {
                return Err(Error::config("bs eta must be >= 0"));
            }
            MethodKind::Scrub => {
                self.scrub.validate_losses()?;
                if self.scrub.max_steps_per_epoch == 0 && self.scrub.min_steps_per_epoch == 0 {
                    return Err(Error::config("scrub needs max or min steps per epoch"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            freeze_k: self.freeze_k,
            shuffle: true,
        }
    }
}

/// Number of samples each quadrant fed to optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub retain_train: usize,
    pub forget_train: usize,
    pub retain_test: usize,
    pub forget_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnAudit {
    pub method: MethodKind,
    pub epochs: usize,
    pub steps: usize,
    pub freeze_k: Option<usize>,
    pub access: AccessLog,
    pub dropped_samples: usize,
    pub loss_curve: Vec<f64>,
    /// Measured, so kept out of serialized reports.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl UnlearnAudit {
    pub(crate) fn new(method: MethodKind, epochs: usize, freeze_k: Option<usize>) -> Self {
        UnlearnAudit {
            method,
            epochs,
            steps: 0,
            freeze_k,
            access: AccessLog::default(),
            dropped_samples: 0,
            loss_curve: Vec::new(),
            wall_time_secs: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub model: InstrumentedModel,
    pub audit: UnlearnAudit,
}
