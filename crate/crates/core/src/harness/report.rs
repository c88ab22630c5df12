use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fairness_preservation, fairness_robustness_correlation, FairnessProfile, Preservation, RobustnessReport};
use crate::unlearning::UnlearnAudit;

/// Accuracy on the four quadrants of the class split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyQuad {
    pub retain_train: f64,
    pub forget_train: f64,
    pub retain_test: f64,
    pub forget_test: f64,
}

impl AccuracyQuad {
    pub fn as_array(&self) -> [f64; 4] {
        [self.retain_train, self.forget_train, self.retain_test, self.forget_test]
    }
}

/// Eval-mode measurements of one model, written by the profile stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: AccuracyQuad,
    pub profile: FairnessProfile,
}

/// Everything measured for one (model, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `original` or an unlearning method name.
    pub model: String,
    pub seed: u64,
    pub accuracy: AccuracyQuad,
    pub profile: FairnessProfile,
    /// Gap deviations from the same seed's original model.
    pub preservation: Preservation,
    pub robustness: RobustnessReport,
    pub audit: Option<UnlearnAudit>,
}

/// Seed means of one model's numbers; the tables and plot render these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub runs: usize,
    pub accuracy: AccuracyQuad,
    pub clean_accuracy: f64,
    /// Adversarial accuracy per attack magnitude, in `attack_etas` order.
    pub adversarial_accuracy: Vec<f64>,
    pub mean_gaps: Vec<f64>,
    pub mean_max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    /// Attack magnitude of the robustness axis; `None` means clean accuracy.
    pub eta: Option<f64>,
    /// (max deviation, accuracy) per unlearned run, in report order.
    pub pairs: Vec<(f64, f64)>,
    pub value: f64,
    pub degenerate: bool,
}

/// Retraining against random labeling on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub retrain_max_deviation: f64,
    pub rl_max_deviation: f64,
    pub retrain_preserves_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub artifact_version: String,
    pub config_digest: String,
    pub data_digest: String,
    pub forget_class: usize,
    pub retain_classes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Unlearning methods in run order, retraining first.
    pub methods: Vec<String>,
    pub attack_etas: Vec<f64>,
    pub original: Vec<RunRecord>,
    /// Method-major, seeds in configured order.
    pub runs: Vec<RunRecord>,
    pub original_summary: ModelSummary,
    pub summary: Vec<ModelSummary>,
    pub correlation: Option<CorrelationRecord>,
    pub retrain_vs_rl: Vec<SeedComparison>,
    /// Seeds where retraining deviates more than random labeling.
    pub flagged_seeds: Vec<u64>,
}

impl ExperimentReport {
    pub fn runs_of<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.model == model)
    }

    pub fn summary_of(&self, model: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|s| s.model == model)
    }
}

/// Measurements gathered by the stages, before the reduction.
pub(crate) struct StageOutputs {
    pub model: String,
    pub seed: u64,
    pub evaluation: Evaluation,
    pub robustness: RobustnessReport,
    pub audit: Option<UnlearnAudit>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn summarize(model: &str, runs: &[&RunRecord]) -> ModelSummary {
    let layers = runs.first().map(|r| r.profile.layers.len()).unwrap_or(0);
    let etas = runs.first().map(|r| r.robustness.adversarial.len()).unwrap_or(0);
    let acc = |f: fn(&AccuracyQuad) -> f64| mean(runs.iter().map(|r| f(&r.accuracy)));
    ModelSummary {
        model: model.to_string(),
        runs: runs.len(),
        accuracy: AccuracyQuad {
            retain_train: acc(|a| a.retain_train),
            forget_train: acc(|a| a.forget_train),
            retain_test: acc(|a| a.retain_test),
            forget_test: acc(|a| a.forget_test),
        },
        clean_accuracy: mean(runs.iter().map(|r| r.robustness.clean_accuracy)),
        adversarial_accuracy: (0..etas)
            .map(|i| mean(runs.iter().map(|r| r.robustness.adversarial[i].accuracy)))
            .collect(),
        mean_gaps: (0..layers).map(|l| mean(runs.iter().map(|r| r.profile.layers[l].gap))).collect(),
        mean_max_deviation: mean(runs.iter().map(|r| r.preservation.max_deviation)),
    }
}

pub(crate) struct ReportHeader {
    pub artifact_version: String,
    pub config_digest: String,
    pub data_digest: String,
    pub forget_class: usize,
    pub retain_classes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
}

/// Single-threaded reduction of per-run measurements, in the given order.
pub(crate) fn assemble(header: ReportHeader, originals: Vec<StageOutputs>, unlearned: Vec<StageOutputs>) -> Result<ExperimentReport> {
    let attack_etas: Vec<f64> = originals
        .first()
        .map(|o| o.robustness.adversarial.iter().map(|p| p.eta).collect())
        .unwrap_or_default();
    for o in originals.iter().chain(&unlearned) {
        let etas: Vec<f64> = o.robustness.adversarial.iter().map(|p| p.eta).collect();
        if etas.len() != attack_etas.len() || etas.iter().zip(&attack_etas).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::contract(format!(
                "robustness of {} (seed {}) was measured at different magnitudes; rerun the attack stage",
                o.model, o.seed
            )));
        }
    }
    let to_record = |o: StageOutputs, reference: &FairnessProfile| -> Result<RunRecord> {
        Ok(RunRecord {
            preservation: fairness_preservation(&o.evaluation.profile, reference)?,
            model: o.model,
            seed: o.seed,
            accuracy: o.evaluation.accuracy,
            profile: o.evaluation.profile,
            robustness: o.robustness,
            audit: o.audit,
        })
    };
    let references: Vec<(u64, FairnessProfile)> = originals.iter().map(|o| (o.seed, o.evaluation.profile.clone())).collect();
    let reference_of = |seed: u64| {
        references
            .iter()
            .find(|(s, _)| *s == seed)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::contract(format!("no original model for seed {seed}")))
    };
    let original = originals
        .into_iter()
        .map(|o| {
            let r = reference_of(o.seed)?.clone();
            to_record(o, &r)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = unlearned
        .into_iter()
        .map(|o| {
            let r = reference_of(o.seed)?.clone();
            to_record(o, &r)
        })
        .collect::<Result<Vec<_>>>()?;

    let original_summary = summarize("original", &original.iter().collect::<Vec<_>>());
    let summary = header
        .methods
        .iter()
        .map(|m| summarize(m, &runs.iter().filter(|r| &r.model == m).collect::<Vec<_>>()))
        .collect();

    let correlation = if runs.len() >= 3 {
        let eta = attack_etas.iter().copied().fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
        let pairs: Vec<(f64, f64)> = runs
            .iter()
            .map(|r| {
                let acc = match eta {
                    Some(e) => r
                        .robustness
                        .adversarial
                        .iter()
                        .find(|p| p.eta == e)
                        .map(|p| p.accuracy)
                        .unwrap_or(r.robustness.clean_accuracy),
                    None => r.robustness.clean_accuracy,
                };
                (r.preservation.max_deviation, acc)
            })
            .collect();
        let c = fairness_robustness_correlation(&pairs)?;
        Some(CorrelationRecord { eta, pairs, value: c.value, degenerate: c.degenerate })
    } else {
        None
    };

    let mut retrain_vs_rl = Vec::new();
    for &seed in &header.seeds {
        let find = |m: &str| runs.iter().find(|r| r.model == m && r.seed == seed).map(|r| r.preservation.max_deviation);
        if let (Some(re), Some(rl)) = (find("retrain"), find("rl")) {
            retrain_vs_rl.push(SeedComparison {
                seed,
                retrain_max_deviation: re,
                rl_max_deviation: rl,
                retrain_preserves_better: re <= rl,
            });
        }
    }
    let flagged_seeds = retrain_vs_rl.iter().filter(|c| !c.retrain_preserves_better).map(|c| c.seed).collect();

    Ok(ExperimentReport {
        artifact_version: header.artifact_version,
        config_digest: header.config_digest,
        data_digest: header.data_digest,
        forget_class: header.forget_class,
        retain_classes: header.retain_classes,
        seeds: header.seeds,
        methods: header.methods,
        attack_etas,
        original,
        runs,
        original_summary,
        summary,
        correlation,
        retrain_vs_rl,
        flagged_seeds,
    })
}
