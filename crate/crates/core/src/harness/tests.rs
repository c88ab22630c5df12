use std::fs;
use std::path::Path;

use super::*;
use crate::canonical;
use crate::error::Error;
use crate::nn::{ArchName, ModelArch};
use crate::training::OptimizerConfig;
use crate::unlearning::{MethodKind, MethodSpec};

fn tiny(methods: Vec<MethodKind>) -> ExperimentConfig {
    let adam = OptimizerConfig::adam(1e-2, 0.9, 5e-4);
    ExperimentConfig {
        dataset: DatasetSpec::Blobs(BlobDataset {
            classes: 4,
            per_class_n: 24,
            dim: 4,
            class_center_scale: 0.8,
            class_sigma: vec![0.08],
            seed: 11,
            test_per_class: 10,
        }),
        arch: ModelArch::new(ArchName::MlpBn, vec![4], vec![6, 6, 6], 4),
        forget_class: 2,
        original: OriginalSpec { epochs: 5, batch_size: 16, optimizer: adam.clone() },
        methods: methods.into_iter().map(|k| MethodSpec::new(k, 2, 16, adam.clone())).collect(),
        seeds: vec![0, 1],
        attack_etas: vec![0.0, 0.1],
        freeze_k: None,
        capture_point: Default::default(),
        variance_divisor: Default::default(),
        output_dir: None,
    }
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

const OUTPUTS: [&str; 8] = [
    REPORT_FILE,
    "tables/accuracy.csv",
    "tables/accuracy.txt",
    "tables/robustness.csv",
    "tables/robustness.txt",
    "tables/fairness.csv",
    "tables/fairness.txt",
    GAP_PLOT_FILE,
];

#[test]
fn desk_toml_matches_the_built_in_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ExperimentConfig::from_path(path).unwrap();
    assert_eq!(cfg.output_dir.as_deref(), Some(Path::new("out")));
    cfg.output_dir = None;
    assert_eq!(cfg, ExperimentConfig::desk_default());
}

#[test]
fn toml_round_trip() {
    let cfg = ExperimentConfig::desk_default();
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
}

#[test]
fn unknown_keys_are_rejected() {
    let text = ExperimentConfig::desk_default().to_toml_string().unwrap();
    let top = format!("learning_rate = 0.1\n{text}");
    assert!(matches!(ExperimentConfig::from_toml_str(&top), Err(Error::Config(_))));
    let nested = text.replacen("kind = \"cf\"", "kind = \"cf\"\nepochz = 3", 1);
    let err = ExperimentConfig::from_toml_str(&nested).unwrap_err();
    assert!(err.to_string().contains("epochz"), "{err}");
    let dataset = text.replacen("test_per_class", "seeed = 1\ntest_per_class", 1);
    assert!(ExperimentConfig::from_toml_str(&dataset).is_err());
}

#[test]
fn invalid_values_are_rejected_before_compute() {
    let mut c = tiny(vec![]);
    c.forget_class = 4;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny(vec![]);
    c.seeds = vec![1, 1];
    assert!(c.validate().is_err());
    let mut c = tiny(vec![MethodKind::Cf]);
    c.freeze_k = Some(5);
    assert!(c.validate().is_err());
    c.freeze_k = Some(4);
    assert!(c.validate().is_ok());
    let mut c = tiny(vec![MethodKind::Cf, MethodKind::Cf]);
    assert!(c.validate().is_err());
    c.methods.pop();
    c.attack_etas = vec![-0.1];
    assert!(c.validate().is_err());
    let mut c = tiny(vec![]);
    if let DatasetSpec::Blobs(b) = &mut c.dataset {
        b.dim = 5;
    }
    assert!(c.validate().is_err());
    assert!(Experiment::new(tiny(vec![]), None).is_err());
}

#[test]
fn retraining_is_planned_first() {
    assert!(tiny(vec![]).method_plan().is_empty());
    let plan = tiny(vec![MethodKind::Rl, MethodKind::Cf]).method_plan();
    let kinds: Vec<MethodKind> = plan.iter().map(|m| m.kind).collect();
    assert_eq!(kinds, [MethodKind::Retrain, MethodKind::Rl, MethodKind::Cf]);
    assert_eq!(plan[0].epochs, 5);

    let mut c = tiny(vec![MethodKind::Cf, MethodKind::Retrain]);
    c.methods[1].epochs = 9;
    c.freeze_k = Some(3);
    c.methods[0].freeze_k = None;
    let plan = c.method_plan();
    assert_eq!(plan[0].kind, MethodKind::Retrain);
    assert_eq!(plan[0].epochs, 9);
    assert_eq!(plan[0].freeze_k, None);
    assert_eq!(plan[1].freeze_k, Some(3));
}

#[test]
fn empty_method_list_reports_only_the_original() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(vec![]), dir.path()).unwrap();
    assert!(report.runs.is_empty() && report.summary.is_empty() && report.methods.is_empty());
    assert_eq!(report.original.len(), 2);
    assert!(report.correlation.is_none());
    assert!(report.original.iter().all(|r| r.preservation.max_deviation == 0.0 && r.audit.is_none()));
    let csv = String::from_utf8(read(dir.path(), "tables/accuracy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(dir.path().join(GAP_PLOT_FILE).exists());
}

#[test]
fn pipeline_is_deterministic_and_stage_decomposable() {
    let cfg = tiny(vec![MethodKind::Cf, MethodKind::Rl]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, a.path()).unwrap();

    let staged = Experiment::new(cfg.clone(), Some(b.path().to_path_buf())).unwrap();
    staged.train_stage().unwrap();
    staged.unlearn_stage().unwrap();
    staged.profile_stage().unwrap();
    staged.attack_stage(None).unwrap();
    staged.report_stage().unwrap();
    for f in OUTPUTS {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }

    let before = read(a.path(), REPORT_FILE);
    Experiment::new(cfg, Some(a.path().to_path_buf())).unwrap().report_stage().unwrap();
    assert_eq!(read(a.path(), REPORT_FILE), before);

    let loaded = load_report(a.path().join(REPORT_FILE)).unwrap();
    assert_eq!(loaded, report);
    assert_eq!(canonical::to_string(&loaded).unwrap().into_bytes(), before);
}

#[test]
fn report_structure() {
    let cfg = tiny(vec![MethodKind::Rl, MethodKind::Cf]);
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(r.methods, ["retrain", "rl", "cf"]);
    assert_eq!(r.runs.len(), 6);
    assert_eq!(r.runs[0].model, "retrain");
    assert_eq!(r.runs[1].model, "retrain");
    assert_eq!(r.retain_classes, [0, 1, 3]);
    assert_eq!(r.attack_etas, [0.0, 0.1]);
    assert_eq!(r.config_digest, cfg.digest().unwrap());
    assert_eq!(r.artifact_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(r.retrain_vs_rl.len(), 2);
    for run in &r.runs {
        let audit = run.audit.as_ref().unwrap();
        assert_eq!(audit.method.as_str(), run.model);
        assert_eq!(run.profile.layers.len(), 3);
        assert_eq!(run.profile.classes(), [0, 1, 3]);
        assert_eq!(run.robustness.adversarial[0].accuracy.to_bits(), run.robustness.clean_accuracy.to_bits());
        assert_eq!(run.robustness.clean_accuracy.to_bits(), run.accuracy.retain_test.to_bits());
        let reference = &r.original.iter().find(|o| o.seed == run.seed).unwrap().profile;
        let expect = run.profile.layers.iter().zip(&reference.layers).map(|(a, b)| (a.gap - b.gap).abs()).fold(0.0, f64::max);
        assert_eq!(run.preservation.max_deviation, expect);
    }
    let retrain = r.runs_of("retrain").next().unwrap().audit.as_ref().unwrap();
    assert_eq!(retrain.access.forget_train, 0);
    let corr = r.correlation.as_ref().unwrap();
    assert_eq!(corr.eta, Some(0.1));
    assert_eq!(corr.pairs.len(), 6);
    let s = r.summary_of("cf").unwrap();
    let mean = r.runs_of("cf").map(|x| x.accuracy.forget_test).sum::<f64>() / 2.0;
    assert_eq!(s.accuracy.forget_test, mean);
    assert_eq!(r.flagged_seeds.len(), r.retrain_vs_rl.iter().filter(|c| !c.retrain_preserves_better).count());
}

#[test]
fn attack_override_and_magnitude_mismatch() {
    let cfg = tiny(vec![MethodKind::Cf]);
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(cfg, Some(dir.path().to_path_buf())).unwrap();
    exp.run_all().unwrap();
    exp.attack_stage(Some(&[0.0])).unwrap();
    let r = exp.report_stage().unwrap();
    assert_eq!(r.attack_etas, [0.0]);
    for s in &r.summary {
        assert_eq!(s.adversarial_accuracy[0].to_bits(), s.clean_accuracy.to_bits());
    }
    let table = String::from_utf8(read(dir.path(), "tables/robustness.csv")).unwrap();
    for line in table.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], cells[2]);
    }
    assert!(exp.attack_stage(Some(&[-1.0])).is_err());
}

#[test]
fn missing_artifacts_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny(vec![MethodKind::Cf]), Some(dir.path().to_path_buf())).unwrap();
    let err = exp.unlearn_stage().unwrap_err();
    assert_eq!(err.kind(), "checkpoint_not_found");
    match &err {
        Error::Stage { stage, method, .. } => {
            assert_eq!(stage, "unlearn");
            assert!(method == "retrain" || method == "cf");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("checkpoint not found"));
    let err = exp.profile_stage().unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "profile"));
    assert!(exp.report_stage().is_err());
}

#[test]
fn tables_follow_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&tiny(vec![MethodKind::Scrub]), dir.path()).unwrap();
    let tables = emit_tables(&r);
    let (name, acc) = &tables[0];
    assert_eq!(*name, "accuracy");
    assert_eq!(acc.header, ["method", "D_r^train", "D_f^train", "D_r^test", "D_f^test"]);
    assert_eq!(acc.rows.len(), 2);
    assert_eq!(acc.rows[0].0, "retrain");
    assert_eq!(acc.rows[1].0, "scrub");
    assert_eq!(acc.rows[1].1, r.summary[1].accuracy.as_array());

    let csv = acc.to_csv();
    for (line, (label, values)) in csv.lines().skip(1).zip(&acc.rows) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], label);
        let parsed: Vec<f64> = cells[1..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(&parsed, values);
    }
    let rob = &tables[1].1;
    assert_eq!(rob.header, ["method", "clean", "eta=0", "eta=0.1"]);
    let fair = &tables[2].1;
    assert_eq!(fair.rows[0].0, "original");
    assert_eq!(fair.header.len(), 5);

    let text = acc.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method"));
    assert!(lines.iter().all(|l| l.len() == lines[0].len()));
}

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let start = l.find("points=\"").unwrap() + 8;
            let end = start + l[start..].find('"').unwrap();
            l[start..end]
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn gap_plot_geometry() {
    let one = vec![("cf".to_string(), vec![0.1, 0.2, 0.05])];
    let svg = gap_plot_svg(&one).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].len(), 3);
    assert!(lines[0].windows(2).all(|w| w[0].0 < w[1].0));
    assert_eq!(gap_plot_svg(&one).unwrap(), svg);

    let spike = vec![
        ("retrain".to_string(), vec![0.01, 0.02, 0.03, 0.02]),
        ("rl".to_string(), vec![0.02, 0.01, 0.02, 0.9]),
    ];
    let lines = polylines(&gap_plot_svg(&spike).unwrap());
    assert_eq!(lines.len(), 2);
    let (best, _) = lines
        .iter()
        .flat_map(|l| l.iter().enumerate())
        .fold((0, f64::INFINITY), |acc, (i, &(_, y))| if y < acc.1 { (i, y) } else { acc });
    assert_eq!(best, 3);

    let bad = vec![("a".to_string(), vec![0.1, 0.2]), ("b".to_string(), vec![0.1])];
    assert!(matches!(gap_plot_svg(&bad), Err(Error::Contract(_))));
    assert!(gap_plot_svg(&[]).unwrap().contains("</svg>"));
}
