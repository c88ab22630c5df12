use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig, OptimizerState};
use crate::canonical;
use crate::data::{batch_iter, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{freeze_prefix, InstrumentedModel, Layer, Mode, UpdateMask};
use crate::tensor::{Tape, Tensor, Var};

fn default_shuffle() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_k: Option<usize>,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig { epochs, batch_size, seed, freeze_k: None, shuffle: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Digest of the training and optimizer configuration stored in
    /// checkpoints.
    pub fn digest(&self, opt: &OptimizerConfig) -> Result<String> {
        canonical::digest(&(self, opt))
    }
}

/// Losses, step and sample counts of a training span.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitStats {
    /// Sample-weighted mean loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub samples_seen: usize,
    /// Samples skipped because a batch of one cannot feed a training batch norm.
    pub dropped_samples: usize,
}

impl FitStats {
    pub fn absorb(&mut self, other: FitStats) {
        self.loss_curve.extend(other.loss_curve);
        self.steps += other.steps;
        self.samples_seen += other.samples_seen;
        self.dropped_samples += other.dropped_samples;
    }
}

/// A model bound to an optimizer and a trainability mask.
///
/// Layers before the first trainable block run in eval mode and their output
/// is computed once per dataset by [`Trainer::prepare`].
#[derive(Clone, Debug)]
pub struct Trainer {
    model: InstrumentedModel,
    optimizer: Optimizer,
    mask: UpdateMask,
    start: usize,
    grad_params: Vec<bool>,
}

impl Trainer {
    pub fn new(model: InstrumentedModel, opt: OptimizerConfig, freeze_k: Option<usize>) -> Result<Self> {
        let n = model.param_count();
        Trainer::assemble(model, Optimizer::new(opt, n)?, freeze_k)
    }

    fn assemble(model: InstrumentedModel, optimizer: Optimizer, freeze_k: Option<usize>) -> Result<Self> {
        let (mask, start) = match freeze_k {
            Some(k) => (freeze_prefix(&model, k)?, model.block_start(k)?),
            None => (UpdateMask::all(model.param_count()), 0),
        };
        if optimizer.state().first.len() != model.param_count() {
            return Err(Error::contract("optimizer state does not match the model"));
        }
        let mut t = Trainer { model, optimizer, mask, start, grad_params: Vec::new() };
        t.refresh_grad_params();
        Ok(t)
    }

    fn refresh_grad_params(&mut self) {
        let flags = self.mask.flags();
        self.grad_params = self
            .model
            .params()
            .iter()
            .scan(0usize, |offset, p| {
                let any = flags[*offset..*offset + p.len()].iter().any(|&f| f);
                *offset += p.len();
                Some(any)
            })
            .collect();
    }

    /// Further restricts updates to the scalars set in `mask`.
    pub fn restrict(&mut self, mask: &UpdateMask) -> Result<()> {
        self.mask = self.mask.intersect(mask)?;
        self.refresh_grad_params();
        Ok(())
    }

    pub fn model(&self) -> &InstrumentedModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut InstrumentedModel {
        &mut self.model
    }

    pub fn into_model(self) -> InstrumentedModel {
        self.model
    }

    pub fn mask(&self) -> &UpdateMask {
        &self.mask
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// First layer that runs on the tape.
    pub fn start_layer(&self) -> usize {
        self.start
    }

    /// Whether some batch-norm layer runs in train mode, which requires
    /// batches of at least two samples.
    pub fn trains_batch_norm(&self) -> bool {
        self.model.layers()[self.start.min(self.model.layers().len())..]
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Input of the first trained layer for every row of `inputs`.
    pub fn prepare(&self, inputs: &Tensor) -> Result<Tensor> {
        if self.start == 0 {
            Ok(inputs.clone())
        } else {
            self.model.prefix_features(inputs, self.start)
        }
    }

    /// One optimizer step on the prepared batch `x`. `loss` maps the logits
    /// to a scalar. Returns the loss value before the update.
    pub fn step<F>(&mut self, x: &Tensor, loss: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self
            .model
            .forward_from(&mut tape, xv, self.start, Mode::Train, &self.grad_params, false)?;
        let lv = loss(&mut tape, out.logits)?;
        let value = tape.value(lv).item()?;
        if !tape.requires_grad(lv) {
            return Ok(value);
        }
        tape.backward(lv)?;
        let mut grads = Vec::with_capacity(self.model.param_count());
        for (p, g) in self.model.params().iter().zip(out.param_grads(&tape)) {
            match g {
                Some(g) => grads.extend(g),
                None => grads.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        let mut params = self.model.flat_params();
        self.optimizer.step(&mut params, &grads, Some(self.mask.flags()))?;
        self.model.set_flat_params(&params)?;
        Ok(value)
    }

    /// Cross-entropy step on rows `batch` of the prepared inputs.
    pub fn step_ce(&mut self, prepared: &Tensor, labels: &[usize], batch: &[usize]) -> Result<f64> {
        let x = prepared.select_rows(batch)?;
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        self.step(&x, |tape, logits| tape.softmax_cross_entropy(logits, &y))
    }

    /// Batches of one epoch. A trailing batch of one sample is dropped when a
    /// batch norm trains; the second value counts dropped samples.
    pub fn epoch_batches(&self, len: usize, cfg: &TrainConfig, epoch: usize) -> Result<(Vec<Vec<usize>>, usize)> {
        let mut batches = batch_iter(len, cfg.batch_size, cfg.seed, epoch as u64, cfg.shuffle)?;
        let mut dropped = 0;
        if self.trains_batch_norm() {
            batches.retain(|b| {
                let keep = b.len() >= 2;
                if !keep {
                    dropped += b.len();
                }
                keep
            });
        }
        Ok((batches, dropped))
    }

    /// Cross-entropy training on `ds` over the given epoch indices.
    pub fn fit(&mut self, ds: &LabeledDataset, cfg: &TrainConfig, epochs: Range<usize>) -> Result<FitStats> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::domain("cannot train on an empty dataset"));
        }
        if ds.num_classes() != self.model.num_classes() {
            return Err(Error::domain(format!(
                "dataset has {} classes, model has {}",
                ds.num_classes(),
                self.model.num_classes()
            )));
        }
        let prepared = self.prepare(&ds.to_tensor()?)?;
        let mut stats = FitStats::default();
        for epoch in epochs {
            let (batches, dropped) = self.epoch_batches(ds.len(), cfg, epoch)?;
            stats.dropped_samples += dropped;
            let mut total = 0.0;
            let mut seen = 0;
            for batch in &batches {
                let loss = self.step_ce(&prepared, ds.labels(), batch)?;
                total += loss * batch.len() as f64;
                seen += batch.len();
                stats.steps += 1;
            }
            stats.samples_seen += seen;
            stats.loss_curve.push(if seen > 0 { total / seen as f64 } else { 0.0 });
        }
        Ok(stats)
    }

    pub fn checkpoint(&self, epoch: usize, cfg: &TrainConfig) -> Result<TrainingCheckpoint> {
        Ok(TrainingCheckpoint {
            format: TRAINING_CHECKPOINT_FORMAT.to_string(),
            version: TRAINING_CHECKPOINT_VERSION,
            model: self.model.clone(),
            optimizer: self.optimizer.state().clone(),
            optimizer_config: self.optimizer.config().clone(),
            epoch,
            config_digest: cfg.digest(self.optimizer.config())?,
        })
    }

    /// Rebuilds a trainer from a checkpoint written under the same configs.
    pub fn resume(ckpt: TrainingCheckpoint, cfg: &TrainConfig, opt: &OptimizerConfig) -> Result<(Self, usize)> {
        if ckpt.config_digest != cfg.digest(opt)? || &ckpt.optimizer_config != opt {
            return Err(Error::contract("checkpoint was written under a different configuration"));
        }
        let optimizer = Optimizer::from_state(ckpt.optimizer_config, ckpt.optimizer)?;
        Ok((Trainer::assemble(ckpt.model, optimizer, cfg.freeze_k)?, ckpt.epoch))
    }
}

pub const TRAINING_CHECKPOINT_FORMAT: &str = "fairgap-training-checkpoint";
pub const TRAINING_CHECKPOINT_VERSION: u32 = 1;

/// Model, optimizer buffers and progress of an interrupted run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: InstrumentedModel,
    pub optimizer: OptimizerState,
    pub optimizer_config: OptimizerConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: InstrumentedModel,
    pub stats: FitStats,
}

/// Trains `model` on `ds` with cross-entropy for `cfg.epochs` epochs.
pub fn train(model: InstrumentedModel, ds: &LabeledDataset, cfg: &TrainConfig, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, opt.clone(), cfg.freeze_k)?;
    let stats = trainer.fit(ds, cfg, 0..cfg.epochs)?;
    Ok(TrainOutcome { model: trainer.into_model(), stats })
}

const EVAL_CHUNK: usize = 512;

/// Eval-mode logits for every sample of `ds`.
pub fn predict_dataset(model: &InstrumentedModel, ds: &LabeledDataset) -> Result<Tensor> {
    let x = ds.to_tensor()?;
    let mut data = Vec::with_capacity(ds.len() * model.num_classes());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.predict(&x.select_rows(chunk)?)?.data());
    }
    Tensor::new(vec![ds.len(), model.num_classes()], data)
}

/// Fraction of samples whose argmax logit (lowest index on ties) equals the
/// label.
pub fn evaluate_accuracy(model: &InstrumentedModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    let logits = predict_dataset(model, ds)?;
    Ok(accuracy_of(&logits, ds.labels()))
}

pub(crate) fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// `epoch,mean_loss` rows, epochs numbered from 1.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", e + 1, canonical::format_float(*l)));
    }
    out
}
