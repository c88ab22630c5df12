use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng as _;

use super::{BsConfig, MethodKind, MethodSpec, ScrubConfig, UnlearnAudit, UnlearnOutcome};
use crate::data::{batch_iter, ClassSplitDataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{fgsm, AttackConfig};
use crate::nn::{init_params, InstrumentedModel, ModelArch, Mode, UpdateMask};
use crate::rng::{self, Purpose};
use crate::tensor::{Tape, Tensor};
use crate::training::{predict_dataset, OptimizerConfig, TrainConfig, Trainer};

fn finish(trainer: Trainer, mut audit: UnlearnAudit, started: Instant) -> UnlearnOutcome {
    audit.wall_time_secs = started.elapsed().as_secs_f64();
    UnlearnOutcome { model: trainer.into_model(), audit }
}

/// Fresh model trained on the retain set only.
pub fn retrain(
    arch: &ModelArch,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    init_seed: u64,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::new(init_params(arch, init_seed)?, opt.clone(), cfg.freeze_k)?;
    let mut audit = UnlearnAudit::new(MethodKind::Retrain, cfg.epochs, cfg.freeze_k);
    let stats = trainer.fit(&split.retain_train, cfg, 0..cfg.epochs)?;
    audit.access.retain_train = stats.samples_seen;
    audit.steps = stats.steps;
    audit.dropped_samples = stats.dropped_samples;
    audit.loss_curve = stats.loss_curve;
    Ok(finish(trainer, audit, started))
}

/// Continued training of the original model on the retain set.
pub fn cf_unlearn(
    model: &InstrumentedModel,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::new(model.clone(), opt.clone(), cfg.freeze_k)?;
    let mut audit = UnlearnAudit::new(MethodKind::Cf, cfg.epochs, cfg.freeze_k);
    if cfg.epochs > 0 {
        let stats = trainer.fit(&split.retain_train, cfg, 0..cfg.epochs)?;
        audit.access.retain_train = stats.samples_seen;
        audit.steps = stats.steps;
        audit.dropped_samples = stats.dropped_samples;
        audit.loss_curve = stats.loss_curve;
    }
    Ok(finish(trainer, audit, started))
}

/// Uniform draw from `{0..classes-1} \ {forget}`.
pub fn redraw_label(r: &mut rng::Rng, classes: usize, forget: usize) -> usize {
    let y = r.random_range(0..classes - 1);
    if y >= forget {
        y + 1
    } else {
        y
    }
}

/// Training on retain (true labels) plus forget samples whose labels are
/// redrawn every time they appear in a batch.
fn random_label_epochs(
    trainer: &mut Trainer,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    label_seed: u64,
    audit: &mut UnlearnAudit,
) -> Result<()> {
    let classes = split.num_classes();
    if classes < 2 {
        return Err(Error::domain("random labels need at least 2 classes"));
    }
    let union = split.retain_train.concat(&split.forget_train)?;
    if union.is_empty() {
        return Err(Error::domain("cannot unlearn with an empty training set"));
    }
    let n_retain = split.retain_train.len();
    let prepared = trainer.prepare(&union.to_tensor()?)?;
    let f = split.forget_class;
    for epoch in 0..cfg.epochs {
        let mut labels_rng = rng::stream(label_seed, Purpose::RandomLabels, epoch as u64);
        let (batches, dropped) = trainer.epoch_batches(union.len(), cfg, epoch)?;
        audit.dropped_samples += dropped;
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    if i < n_retain {
                        union.labels()[i]
                    } else {
                        redraw_label(&mut labels_rng, classes, f)
                    }
                })
                .collect();
            let forget_hits = batch.iter().filter(|&&i| i >= n_retain).count();
            audit.access.forget_train += forget_hits;
            audit.access.retain_train += batch.len() - forget_hits;
            let x = prepared.select_rows(batch)?;
            let loss = trainer.step(&x, |tape, logits| tape.softmax_cross_entropy(logits, &labels))?;
            total += loss * batch.len() as f64;
            seen += batch.len();
            audit.steps += 1;
        }
        audit.loss_curve.push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    Ok(())
}

/// Random-label fine-tuning.
pub fn rl_unlearn(
    model: &InstrumentedModel,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    label_seed: u64,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::new(model.clone(), opt.clone(), cfg.freeze_k)?;
    let mut audit = UnlearnAudit::new(MethodKind::Rl, cfg.epochs, cfg.freeze_k);
    random_label_epochs(&mut trainer, split, cfg, label_seed, &mut audit)?;
    Ok(finish(trainer, audit, started))
}

/// `|d loss / d theta|` per parameter scalar for the mean cross-entropy of
/// `forget` in eval mode.
pub fn saliency(model: &InstrumentedModel, forget: &LabeledDataset) -> Result<Vec<f64>> {
    if forget.is_empty() {
        return Err(Error::domain("saliency needs forget samples"));
    }
    let mut m = model.clone();
    let mut tape = Tape::new();
    let x = tape.constant(forget.to_tensor()?);
    let out = m.forward(&mut tape, x, Mode::Eval, false)?;
    let loss = tape.softmax_cross_entropy(out.logits, forget.labels())?;
    tape.backward(loss)?;
    Ok(out
        .param_grads(&tape)
        .into_iter()
        .zip(model.params())
        .flat_map(|(g, p)| g.unwrap_or_else(|| vec![0.0; p.len()]))
        .map(f64::abs)
        .collect())
}

/// Selects the `round(fraction * eligible)` eligible scalars with the
/// largest saliency; ties go to the lower index.
pub fn top_fraction_mask(saliency: &[f64], eligible: &UpdateMask, fraction: f64) -> Result<UpdateMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("saliency fraction {fraction} outside (0, 1]")));
    }
    if saliency.len() != eligible.len() {
        return Err(Error::contract("saliency and mask lengths differ"));
    }
    let mut idx: Vec<usize> = (0..saliency.len()).filter(|&i| eligible.is_set(i)).collect();
    let keep = (fraction * idx.len() as f64).round() as usize;
    idx.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    let mut flags = vec![false; saliency.len()];
    for &i in &idx[..keep] {
        flags[i] = true;
    }
    Ok(UpdateMask::from_flags(flags))
}

/// Random-label fine-tuning restricted to the most forget-salient scalars.
pub fn salun_unlearn(
    model: &InstrumentedModel,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    fraction: f64,
    label_seed: u64,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::new(model.clone(), opt.clone(), cfg.freeze_k)?;
    let sal = saliency(model, &split.forget_train)?;
    let mask = top_fraction_mask(&sal, trainer.mask(), fraction)?;
    trainer.restrict(&mask)?;
    let mut audit = UnlearnAudit::new(MethodKind::Salun, cfg.epochs, cfg.freeze_k);
    random_label_epochs(&mut trainer, split, cfg, label_seed, &mut audit)?;
    Ok(finish(trainer, audit, started))
}

/// Largest logit (lowest index on ties) unless it is `avoid`, in which case
/// the runner-up.
fn best_other(row: &[f64], avoid: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    if order[0] == avoid {
        order[1]
    } else {
        order[0]
    }
}

/// Adversarial target of every forget sample: the prediction on its FGSM
/// perturbation, never the forget class itself.
pub fn bs_targets(model: &InstrumentedModel, forget: &LabeledDataset, forget_class: usize, eta: f64) -> Result<Vec<usize>> {
    let x = forget.to_tensor()?;
    let adv = fgsm(model, &x, forget.labels(), &AttackConfig::new(eta))?;
    let adv_ds = LabeledDataset::new(forget.sample_shape().to_vec(), adv.into_data(), forget.labels().to_vec(), forget.num_classes())?;
    let logits = predict_dataset(model, &adv_ds)?;
    Ok((0..logits.rows()).map(|r| best_other(logits.row(r), forget_class)).collect())
}

/// Fine-tuning on the forget set toward adversarial neighbour labels.
pub fn bs_unlearn(
    model: &InstrumentedModel,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    bs: &BsConfig,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let forget = &split.forget_train;
    if forget.is_empty() {
        return Err(Error::domain("boundary shrink needs forget samples"));
    }
    if split.num_classes() < 2 {
        return Err(Error::domain("boundary shrink needs at least 2 classes"));
    }
    let mut trainer = Trainer::new(model.clone(), opt.clone(), cfg.freeze_k)?;
    let mut audit = UnlearnAudit::new(MethodKind::Bs, cfg.epochs, cfg.freeze_k);
    let prepared = trainer.prepare(&forget.to_tensor()?)?;
    let mut targets = if bs.static_targets {
        bs_targets(model, forget, split.forget_class, bs.eta)?
    } else {
        Vec::new()
    };
    for epoch in 0..cfg.epochs {
        if !bs.static_targets {
            targets = bs_targets(trainer.model(), forget, split.forget_class, bs.eta)?;
        }
        let (batches, dropped) = trainer.epoch_batches(forget.len(), cfg, epoch)?;
        audit.dropped_samples += dropped;
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let loss = trainer.step_ce(&prepared, &targets, batch)?;
            audit.access.forget_train += batch.len();
            total += loss * batch.len() as f64;
            seen += batch.len();
            audit.steps += 1;
        }
        audit.loss_curve.push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    Ok(finish(trainer, audit, started))
}

/// Endless stream of shuffled batches, reshuffled on every pass.
struct BatchCursor {
    len: usize,
    batch_size: usize,
    seed: u64,
    pass: u64,
    drop_singletons: bool,
    queue: VecDeque<Vec<usize>>,
}

impl BatchCursor {
    fn new(len: usize, batch_size: usize, seed: u64, drop_singletons: bool) -> Self {
        BatchCursor { len, batch_size, seed, pass: 0, drop_singletons, queue: VecDeque::new() }
    }

    fn next_batch(&mut self) -> Result<Option<Vec<usize>>> {
        if self.len == 0 || (self.drop_singletons && self.len < 2) {
            return Ok(None);
        }
        while self.queue.is_empty() {
            let batches = batch_iter(self.len, self.batch_size, self.seed, self.pass, true)?;
            self.pass += 1;
            self.queue
                .extend(batches.into_iter().filter(|b| !self.drop_singletons || b.len() >= 2));
        }
        Ok(self.queue.pop_front())
    }
}

/// Teacher-student unlearning: the student starts as the teacher, pushes its
/// forget-set outputs away from the teacher's and keeps its retain-set
/// outputs close to them.
pub fn scrub_unlearn(
    teacher: &InstrumentedModel,
    split: &ClassSplitDataset,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    scrub: &ScrubConfig,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    scrub.validate_losses()?;
    let mut trainer = Trainer::new(teacher.clone(), opt.clone(), cfg.freeze_k)?;
    let mut audit = UnlearnAudit::new(MethodKind::Scrub, cfg.epochs, cfg.freeze_k);
    if cfg.epochs == 0 || (scrub.max_steps_per_epoch == 0 && scrub.min_steps_per_epoch == 0) {
        return Ok(finish(trainer, audit, started));
    }
    let forget = &split.forget_train;
    let retain = &split.retain_train;
    let logits_of = |ds: &LabeledDataset| -> Result<Option<Tensor>> {
        if ds.is_empty() {
            Ok(None)
        } else {
            Ok(Some(predict_dataset(teacher, ds)?))
        }
    };
    let teacher_forget = logits_of(forget)?;
    let teacher_retain = logits_of(retain)?;
    let forget_x = if forget.is_empty() { None } else { Some(trainer.prepare(&forget.to_tensor()?)?) };
    let retain_x = if retain.is_empty() { None } else { Some(trainer.prepare(&retain.to_tensor()?)?) };
    let singles = trainer.trains_batch_norm();
    let mut forget_batches = BatchCursor::new(
        forget.len(),
        cfg.batch_size,
        rng::derive_seed(cfg.seed, Purpose::Scrub, 0),
        singles,
    );
    let mut retain_batches = BatchCursor::new(
        retain.len(),
        cfg.batch_size,
        rng::derive_seed(cfg.seed, Purpose::Scrub, 1),
        singles,
    );
    let t = scrub.distill_temperature;
    let w = scrub.retain_ce_weight;
    for _ in 0..cfg.epochs {
        let (mut total, mut seen) = (0.0, 0usize);
        if let (Some(x), Some(tl)) = (&forget_x, &teacher_forget) {
            for _ in 0..scrub.max_steps_per_epoch {
                let Some(batch) = forget_batches.next_batch()? else { break };
                let xb = x.select_rows(&batch)?;
                let tb = tl.select_rows(&batch)?;
                let loss = trainer.step(&xb, |tape, logits| {
                    let kl = tape.kl_divergence(logits, &tb, t)?;
                    tape.scale(kl, -1.0)
                })?;
                audit.access.forget_train += batch.len();
                audit.steps += 1;
                total += loss * batch.len() as f64;
                seen += batch.len();
            }
        }
        if let (Some(x), Some(tl)) = (&retain_x, &teacher_retain) {
            for _ in 0..scrub.min_steps_per_epoch {
                let Some(batch) = retain_batches.next_batch()? else { break };
                let xb = x.select_rows(&batch)?;
                let tb = tl.select_rows(&batch)?;
                let labels = retain.batch_labels(&batch);
                let loss = trainer.step(&xb, |tape, logits| {
                    let kl = tape.kl_divergence(logits, &tb, t)?;
                    let ce = tape.softmax_cross_entropy(logits, &labels)?;
                    let ce = tape.scale(ce, w)?;
                    tape.add(kl, ce)
                })?;
                audit.access.retain_train += batch.len();
                audit.steps += 1;
                total += loss * batch.len() as f64;
                seen += batch.len();
            }
        }
        audit.loss_curve.push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    Ok(finish(trainer, audit, started))
}

/// Everything a method may need besides its own spec.
#[derive(Clone, Copy, Debug)]
pub struct UnlearnContext<'a> {
    pub arch: &'a ModelArch,
    pub original: &'a InstrumentedModel,
    pub split: &'a ClassSplitDataset,
    /// Seed of shuffling and label draws.
    pub seed: u64,
    /// Initialization seed of the original model, reused by retraining.
    pub init_seed: u64,
}

/// Runs one method and records its audit, including wall time.
pub fn run_method(spec: &MethodSpec, ctx: &UnlearnContext<'_>) -> Result<UnlearnOutcome> {
    spec.validate()?;
    let started = Instant::now();
    let cfg = spec.train_config(ctx.seed);
    let opt = &spec.optimizer;
    let label_seed = rng::derive_seed(ctx.seed, Purpose::RandomLabels, 0);
    let mut outcome = match spec.kind {
        MethodKind::Retrain => retrain(ctx.arch, ctx.split, &cfg, opt, ctx.init_seed)?,
        MethodKind::Cf => cf_unlearn(ctx.original, ctx.split, &cfg, opt)?,
        MethodKind::Rl => rl_unlearn(ctx.original, ctx.split, &cfg, opt, label_seed)?,
        MethodKind::Salun => salun_unlearn(ctx.original, ctx.split, &cfg, opt, spec.salun_fraction, label_seed)?,
        MethodKind::Bs => bs_unlearn(ctx.original, ctx.split, &cfg, opt, &spec.bs)?,
        MethodKind::Scrub => scrub_unlearn(ctx.original, ctx.split, &cfg, opt, &spec.scrub)?,
    };
    outcome.audit.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(outcome)
}
