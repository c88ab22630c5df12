use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::render;
use super::report::{assemble, AccuracyQuad, Evaluation, ExperimentReport, ReportHeader, StageOutputs};
use crate::canonical;
use crate::checkpoint::{load_model, save_model, ModelCheckpoint, SeedLineage};
use crate::data::ClassSplitDataset;
use crate::error::{Error, Result};
use crate::metrics::{fairness_profile, robustness_report, RobustnessReport};
use crate::nn::{init_params, InstrumentedModel};
use crate::training::{evaluate_accuracy, train};
use crate::unlearning::{run_method, MethodSpec, UnlearnAudit, UnlearnContext};

pub const ORIGINAL: &str = "original";
pub const REPORT_FILE: &str = "report.json";
pub const GAP_PLOT_FILE: &str = "plots/fairness_gap.svg";

/// Layout of an output directory:
///
/// ```text
/// checkpoints/seed-{s}/{model}.ckpt
/// audits/seed-{s}/{method}.json
/// evaluations/seed-{s}/{model}.json
/// robustness/seed-{s}/{model}.json
/// timings/{stage}.json
/// report.json
/// tables/{accuracy,robustness,fairness}.{csv,txt}
/// plots/fairness_gap.svg
/// ```
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    /// Base for relative dataset paths.
    pub data_dir: PathBuf,
}

fn write_canonical<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_text(&canonical::to_string(value)?, path)
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    match fs::read_to_string(path) {
        Ok(text) => canonical::from_str(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::CheckpointNotFound(format!("{} (run the earlier stages first)", path.display())))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

impl Experiment {
    /// Validates the config; `out_dir` overrides the configured directory.
    pub fn new(config: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::config("no output directory given"))?;
        Ok(Experiment { config, out_dir, data_dir: PathBuf::from(".") })
    }

    pub fn with_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = dir.into();
        self
    }

    pub fn checkpoint_path(&self, seed: u64, model: &str) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("seed-{seed}")).join(format!("{model}.ckpt"))
    }

    fn artifact_path(&self, kind: &str, seed: u64, model: &str) -> PathBuf {
        self.out_dir.join(kind).join(format!("seed-{seed}")).join(format!("{model}.json"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join(REPORT_FILE)
    }

    /// Models measured by the later stages: the original, then the method plan.
    pub fn model_names(&self) -> Vec<String> {
        std::iter::once(ORIGINAL.to_string())
            .chain(self.config.method_plan().iter().map(|m| m.kind.to_string()))
            .collect()
    }

    fn split(&self) -> Result<ClassSplitDataset> {
        Ok(self.config.load_data(&self.data_dir)?.1)
    }

    fn lineage(&self, seed: u64, method: Option<&str>) -> SeedLineage {
        SeedLineage {
            data_seed: self.config.dataset.data_seed(),
            init_seed: seed,
            run_seed: seed,
            method: method.map(str::to_string),
        }
    }

    fn load_checkpoint(&self, seed: u64, model: &str) -> Result<InstrumentedModel> {
        let mut m = load_model(self.checkpoint_path(seed, model))?.model;
        m.set_capture_point(self.config.capture_point);
        Ok(m)
    }

    fn write_timings(&self, stage: &str, timings: &BTreeMap<String, BTreeMap<u64, f64>>) -> Result<()> {
        let path = self.out_dir.join("timings").join(format!("{stage}.json"));
        write_text(&serde_json::to_string_pretty(timings)?, &path)
    }

    /// Trains one original model per seed.
    pub fn train_stage(&self) -> Result<()> {
        let (train_set, _) = self.config.load_data(&self.data_dir).map_err(|e| e.in_stage("train", ORIGINAL, "-"))?;
        let cfg = &self.config;
        let times = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let run = || -> Result<f64> {
                    let started = Instant::now();
                    let model = init_params(&cfg.arch, seed)?;
                    let outcome = train(model, &train_set, &cfg.original.train_config(seed), &cfg.original.optimizer)?;
                    let secs = started.elapsed().as_secs_f64();
                    save_model(&ModelCheckpoint::new(outcome.model, self.lineage(seed, None)), self.checkpoint_path(seed, ORIGINAL))?;
                    Ok(secs)
                };
                run().map_err(|e| e.in_stage("train", ORIGINAL, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        let timings = BTreeMap::from([(ORIGINAL.to_string(), cfg.seeds.iter().copied().zip(times).collect())]);
        self.write_timings("train", &timings)
    }

    /// Runs every planned method on every seed's original model.
    pub fn unlearn_stage(&self) -> Result<()> {
        let plan = self.config.method_plan();
        if plan.is_empty() {
            return Ok(());
        }
        let split = self.split().map_err(|e| e.in_stage("unlearn", "-", "-"))?;
        let jobs: Vec<(&MethodSpec, u64)> = plan.iter().flat_map(|m| self.config.seeds.iter().map(move |&s| (m, s))).collect();
        let times = jobs
            .par_iter()
            .map(|&(spec, seed)| {
                let name = spec.kind.to_string();
                let run = || -> Result<f64> {
                    let original = self.load_checkpoint(seed, ORIGINAL)?;
                    let ctx = UnlearnContext {
                        arch: &self.config.arch,
                        original: &original,
                        split: &split,
                        seed,
                        init_seed: seed,
                    };
                    let outcome = run_method(spec, &ctx)?;
                    save_model(&ModelCheckpoint::new(outcome.model, self.lineage(seed, Some(&name))), self.checkpoint_path(seed, &name))?;
                    write_canonical(&outcome.audit, &self.artifact_path("audits", seed, &name))?;
                    Ok(outcome.audit.wall_time_secs)
                };
                run().map_err(|e| e.in_stage("unlearn", &name, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut timings: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
        for (&(spec, seed), secs) in jobs.iter().zip(times) {
            timings.entry(spec.kind.to_string()).or_default().insert(seed, secs);
        }
        self.write_timings("unlearn", &timings)
    }

    fn jobs(&self) -> Vec<(String, u64)> {
        self.model_names()
            .into_iter()
            .flat_map(|m| self.config.seeds.iter().map(move |&s| (m.clone(), s)))
            .collect()
    }

    /// Accuracy quadruple and retain-test fairness profile of every model.
    pub fn profile_stage(&self) -> Result<()> {
        let split = self.split().map_err(|e| e.in_stage("profile", "-", "-"))?;
        let classes = split.retain_classes();
        self.jobs()
            .par_iter()
            .map(|(name, seed)| {
                let run = || -> Result<()> {
                    let model = self.load_checkpoint(*seed, name)?;
                    let evaluation = Evaluation {
                        accuracy: AccuracyQuad {
                            retain_train: evaluate_accuracy(&model, &split.retain_train)?,
                            forget_train: evaluate_accuracy(&model, &split.forget_train)?,
                            retain_test: evaluate_accuracy(&model, &split.retain_test)?,
                            forget_test: evaluate_accuracy(&model, &split.forget_test)?,
                        },
                        profile: fairness_profile(&model, &split.retain_test, &classes, "retain_test", self.config.variance_divisor)?,
                    };
                    write_canonical(&evaluation, &self.artifact_path("evaluations", *seed, name))
                };
                run().map_err(|e| e.in_stage("profile", name, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Clean and FGSM accuracy on the retain-test set; `etas` overrides the
    /// configured magnitudes.
    pub fn attack_stage(&self, etas: Option<&[f64]>) -> Result<()> {
        let etas = etas.unwrap_or(&self.config.attack_etas);
        for &eta in etas {
            crate::metrics::AttackConfig::new(eta).validate()?;
        }
        let split = self.split().map_err(|e| e.in_stage("attack", "-", "-"))?;
        self.jobs()
            .par_iter()
            .map(|(name, seed)| {
                let run = || -> Result<()> {
                    let model = self.load_checkpoint(*seed, name)?;
                    let report = robustness_report(&model, &split.retain_test, etas)?;
                    write_canonical(&report, &self.artifact_path("robustness", *seed, name))
                };
                run().map_err(|e| e.in_stage("attack", name, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Reduces the saved artifacts into the report, tables and plot.
    pub fn report_stage(&self) -> Result<ExperimentReport> {
        let split = self.split().map_err(|e| e.in_stage("report", "-", "-"))?;
        let plan = self.config.method_plan();
        let mut originals = Vec::new();
        let mut unlearned = Vec::new();
        for (name, seed) in self.jobs() {
            let gather = || -> Result<StageOutputs> {
                let audit: Option<UnlearnAudit> = if name == ORIGINAL {
                    None
                } else {
                    Some(read_artifact(&self.artifact_path("audits", seed, &name))?)
                };
                Ok(StageOutputs {
                    evaluation: read_artifact(&self.artifact_path("evaluations", seed, &name))?,
                    robustness: read_artifact::<RobustnessReport>(&self.artifact_path("robustness", seed, &name))?,
                    audit,
                    model: name.clone(),
                    seed,
                })
            };
            let out = gather().map_err(|e| e.in_stage("report", &name, seed))?;
            if name == ORIGINAL {
                originals.push(out);
            } else {
                unlearned.push(out);
            }
        }
        let header = ReportHeader {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: self.config.digest()?,
            data_digest: canonical::sha256_hex(
                format!(
                    "{}{}{}{}",
                    split.retain_train.digest(),
                    split.forget_train.digest(),
                    split.retain_test.digest(),
                    split.forget_test.digest()
                )
                .as_bytes(),
            ),
            forget_class: split.forget_class,
            retain_classes: split.retain_classes(),
            seeds: self.config.seeds.clone(),
            methods: plan.iter().map(|m| m.kind.to_string()).collect(),
        };
        let report = assemble(header, originals, unlearned).map_err(|e| e.in_stage("report", "-", "-"))?;
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &ExperimentReport) -> Result<()> {
        write_canonical(report, &self.report_path())?;
        for (name, table) in render::emit_tables(report) {
            write_text(&table.to_csv(), &self.out_dir.join("tables").join(format!("{name}.csv")))?;
            write_text(&table.to_text(), &self.out_dir.join("tables").join(format!("{name}.txt")))?;
        }
        let mut series = vec![(ORIGINAL.to_string(), report.original_summary.mean_gaps.clone())];
        series.extend(report.summary.iter().map(|s| (s.model.clone(), s.mean_gaps.clone())));
        write_text(&render::gap_plot_svg(&series)?, &self.out_dir.join(GAP_PLOT_FILE))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<ExperimentReport> {
        self.train_stage()?;
        self.unlearn_stage()?;
        self.profile_stage()?;
        self.attack_stage(None)?;
        self.report_stage()
    }
}

/// Runs the whole pipeline for `cfg`, writing into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<ExperimentReport> {
    Experiment::new(cfg.clone(), Some(out_dir.into()))?.run_all()
}

/// Reads a report written by the report stage.
pub fn load_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    read_artifact(path.as_ref())
}
