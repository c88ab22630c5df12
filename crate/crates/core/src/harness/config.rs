use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::data::{load_idx, make_blobs, make_blobs_test, split_retain_forget, ClassSplitDataset, LabeledDataset, SyntheticBlobSpec};
use crate::error::{Error, Result};
use crate::metrics::{AttackConfig, VarianceDivisor};
use crate::nn::{ArchName, CapturePoint, ModelArch};
use crate::training::{OptimizerConfig, TrainConfig};
use crate::unlearning::{MethodKind, MethodSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobDataset {
    pub classes: usize,
    pub per_class_n: usize,
    pub dim: usize,
    pub class_center_scale: f64,
    pub class_sigma: Vec<f64>,
    pub seed: u64,
    /// Test samples per class, drawn from an independent stream.
    pub test_per_class: usize,
}

impl BlobDataset {
    pub fn spec(&self) -> SyntheticBlobSpec {
        SyntheticBlobSpec {
            classes: self.classes,
            per_class_n: self.per_class_n,
            dim: self.dim,
            class_center_scale: self.class_center_scale,
            class_sigma: self.class_sigma.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxDataset {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobDataset),
    Idx(IdxDataset),
}

impl DatasetSpec {
    /// Seed the data was generated from; 0 for files.
    pub fn data_seed(&self) -> u64 {
        match self {
            DatasetSpec::Blobs(b) => b.seed,
            DatasetSpec::Idx(_) => 0,
        }
    }

    pub fn load(&self, base: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSpec::Blobs(b) => {
                let spec = b.spec();
                Ok((make_blobs(&spec)?, make_blobs_test(&spec, b.test_per_class)?))
            }
            DatasetSpec::Idx(i) => {
                let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                Ok((
                    load_idx(at(&i.train_images), at(&i.train_labels), Some(i.num_classes))?,
                    load_idx(at(&i.test_images), at(&i.test_labels), Some(i.num_classes))?,
                ))
            }
        }
    }
}

/// How the original model is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginalSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl OriginalSpec {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig::new(self.epochs, self.batch_size, seed)
    }
}

/// A complete experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub arch: ModelArch,
    pub forget_class: usize,
    pub original: OriginalSpec,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub attack_etas: Vec<f64>,
    /// Default first trainable normalization layer for the approximate
    /// methods; a method's own `freeze_k` wins.
    #[serde(default)]
    pub freeze_k: Option<usize>,
    #[serde(default)]
    pub capture_point: CapturePoint,
    #[serde(default)]
    pub variance_divisor: VarianceDivisor,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if let DatasetSpec::Blobs(b) = &self.dataset {
            b.spec().validate()?;
            if b.classes != self.arch.classes || b.dim != self.arch.input_width() {
                return Err(Error::config("dataset classes or dimension disagree with the architecture"));
            }
            if b.per_class_n < 1 || b.test_per_class < 2 {
                return Err(Error::config("blobs need per_class_n >= 1 and test_per_class >= 2"));
            }
        }
        if self.forget_class >= self.arch.classes {
            return Err(Error::config(format!(
                "forget_class {} out of range for {} classes",
                self.forget_class, self.arch.classes
            )));
        }
        if self.arch.classes < 3 {
            return Err(Error::config("at least 3 classes are needed so that 2 retain classes remain"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        self.original.optimizer.validate()?;
        if self.original.batch_size < 2 {
            return Err(Error::config("original batch_size must be >= 2"));
        }
        for eta in &self.attack_etas {
            AttackConfig::new(*eta).validate()?;
        }
        let l = self.arch.widths.len();
        let check_k = |k: Option<usize>| match k {
            Some(k) if k == 0 || k > l + 1 => Err(Error::config(format!("freeze_k {k} outside 1..={}", l + 1))),
            _ => Ok(()),
        };
        check_k(self.freeze_k)?;
        let mut kinds = Vec::new();
        for m in &self.methods {
            m.validate()?;
            check_k(m.freeze_k)?;
            if kinds.contains(&m.kind) {
                return Err(Error::config(format!("method {} listed twice", m.kind)));
            }
            kinds.push(m.kind);
        }
        Ok(())
    }

    /// Methods in run order: retraining first whenever any method is listed,
    /// using the original model's training recipe unless configured.
    pub fn method_plan(&self) -> Vec<MethodSpec> {
        if self.methods.is_empty() {
            return Vec::new();
        }
        let retrain = self
            .methods
            .iter()
            .find(|m| m.kind == MethodKind::Retrain)
            .cloned()
            .unwrap_or_else(|| {
                MethodSpec::new(
                    MethodKind::Retrain,
                    self.original.epochs,
                    self.original.batch_size,
                    self.original.optimizer.clone(),
                )
            });
        let mut plan = vec![retrain];
        for m in self.methods.iter().filter(|m| m.kind != MethodKind::Retrain) {
            let mut m = m.clone();
            if m.freeze_k.is_none() {
                m.freeze_k = self.freeze_k;
            }
            plan.push(m);
        }
        plan
    }

    /// Digest of everything that determines results; the output directory
    /// is excluded.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        canonical::digest(&c)
    }

    /// The full training set and its class split.
    pub fn load_data(&self, base: &Path) -> Result<(LabeledDataset, ClassSplitDataset)> {
        let (train, test) = self.dataset.load(base)?;
        if train.num_classes() != self.arch.classes || train.sample_width() != self.arch.input_width() {
            return Err(Error::config("dataset does not match the architecture"));
        }
        train.check_class_coverage()?;
        let split = split_retain_forget(&train, &test, self.forget_class)?;
        Ok((train, split))
    }

    /// The desk-scale default: 4-class blobs in 16 dimensions, a
    /// batch-norm MLP and all six methods over five seeds.
    pub fn desk_default() -> Self {
        let adam = OptimizerConfig::adam(1e-2, 0.9, 5e-4);
        let salun_sgd = OptimizerConfig::sgd(1e-2, 0.9, 5e-4);
        let bs_sgd = OptimizerConfig::sgd(1e-2, 0.0, 0.0);
        ExperimentConfig {
            dataset: DatasetSpec::Blobs(BlobDataset {
                classes: 4,
                per_class_n: 200,
                dim: 16,
                class_center_scale: 0.6,
                class_sigma: vec![0.12],
                seed: 2024,
                test_per_class: 100,
            }),
            arch: ModelArch::new(ArchName::MlpBn, vec![16], vec![32, 32, 32], 4),
            forget_class: 3,
            original: OriginalSpec { epochs: 30, batch_size: 32, optimizer: adam.clone() },
            methods: vec![
                MethodSpec::new(MethodKind::Cf, 50, 32, adam.clone()),
                MethodSpec::new(MethodKind::Rl, 50, 32, adam.clone()),
                MethodSpec::new(MethodKind::Bs, 50, 32, bs_sgd),
                MethodSpec::new(MethodKind::Salun, 50, 32, salun_sgd),
                MethodSpec::new(MethodKind::Scrub, 50, 32, adam),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            attack_etas: vec![0.0, 0.05, 0.2],
            freeze_k: None,
            capture_point: CapturePoint::PreAffine,
            variance_divisor: VarianceDivisor::Population,
            output_dir: None,
        }
    }
}
