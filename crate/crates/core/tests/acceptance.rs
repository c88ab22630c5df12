//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. Runs without the libtest harness so the lines always
//! show; exits nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fairgap::checkpoint::load_model;
use fairgap::data::{make_blobs, make_blobs_test, split_retain_forget, LabeledDataset, SyntheticBlobSpec};
use fairgap::harness::{run_experiment, ExperimentConfig, ExperimentReport, GAP_PLOT_FILE, REPORT_FILE};
use fairgap::metrics::{adversarial_accuracy, class_variance, fairness_gap, fgsm, AttackConfig};
use fairgap::nn::{init_params, ArchName, ModelArch};
use fairgap::rng::Rng;
use fairgap::training::{evaluate_accuracy, train, OptimizerConfig, TrainConfig};
use fairgap::unlearning::{cf_unlearn, rl_unlearn, run_method, salun_unlearn, MethodKind, MethodSpec, UnlearnContext};
use rand::{Rng as _, SeedableRng};

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    secs: f64,
}

fn criterion(id: usize, title: &'static str, body: impl FnOnce() -> (bool, String)) -> Outcome {
    let started = Instant::now();
    let (passed, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let o = Outcome { id, title, passed, detail, secs: started.elapsed().as_secs_f64() };
    println!(
        "{} criterion {:>2} {}: {} [{:.1} s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.title,
        o.detail,
        o.secs
    );
    o
}

fn gradient_correctness() -> (bool, String) {
    let started = Instant::now();
    let mut stats = op_gradient_suite(100).unwrap();
    for (i, (name, arch, batch)) in composite_models().into_iter().enumerate() {
        stats.extend(model_gradient_suite(name, &arch, batch, 100, 500 + i as u64).unwrap());
    }
    let secs = started.elapsed().as_secs_f64();
    let worst = stats.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let failing: Vec<&str> = stats.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
    let full = stats.iter().all(|s| s.cases == 100);
    let ok = failing.is_empty() && full && secs <= 30.0;
    (
        ok,
        format!(
            "{} checks x 100 cases, worst rel. error {:.2e} ({}), limit {GRAD_TOLERANCE:e}, failing {:?}, {secs:.1} s of 30 s",
            stats.len(),
            worst.max_error,
            worst.name,
            failing
        ),
    )
}

fn variance_oracle() -> (bool, String) {
    let started = Instant::now();
    let mut rng = Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let dim = rng.random_range(1..24);
        let scale = [1e-3, 1.0, 10.0][rng.random_range(0..3)];
        let offset = rng.random_range(-3.0..3.0);
        let data: Vec<f64> = (0..n * dim).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let got = class_variance(&data, dim).unwrap();
        worst = worst.max((got - covariance_trace_oracle(&data, dim)).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    (worst <= 1e-12 && secs <= 10.0, format!("1000 feature sets, max |diff| {worst:.2e} (limit 1e-12), {secs:.2} s of 10 s"))
}

fn metric_exactness(desk: &ExperimentReport) -> (bool, String) {
    let mut rng = Rng::seed_from_u64(3);
    let single_ok = (0..1000).all(|_| {
        let m = BTreeMap::from([(rng.random_range(0..10usize), rng.random_range(0.0..5.0))]);
        fairness_gap(&m).unwrap() == 0.0
    });
    let nonneg_ok = (0..1000).all(|_| {
        let k = rng.random_range(1..8);
        let m: BTreeMap<usize, f64> = (0..k).map(|c| (c, rng.random_range(0.0..5.0))).collect();
        fairness_gap(&m).unwrap() >= 0.0
    });
    let profile_nonneg = desk.original.iter().chain(&desk.runs).all(|r| r.profile.layers.iter().all(|l| l.gap >= 0.0));

    let mut bitwise = 0;
    let mut mismatched = 0;
    for r in desk.original.iter().chain(&desk.runs) {
        let p = r.robustness.adversarial.iter().find(|p| p.eta == 0.0).unwrap();
        if p.accuracy.to_bits() == r.robustness.clean_accuracy.to_bits() {
            bitwise += 1;
        } else {
            mismatched += 1;
        }
    }
    let arch = ModelArch::new(ArchName::MlpBn, vec![6], vec![8, 8, 8], 3);
    for seed in 0..5u64 {
        let model = init_params(&arch, seed).unwrap();
        let mut r = Rng::seed_from_u64(seed);
        let inputs: Vec<f64> = (0..60 * 6).map(|_| r.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
        let ds = LabeledDataset::new(vec![6], inputs, labels, 3).unwrap();
        let adv = adversarial_accuracy(&model, &ds, &AttackConfig::new(0.0)).unwrap();
        if adv.to_bits() == evaluate_accuracy(&model, &ds).unwrap().to_bits() {
            bitwise += 1;
        } else {
            mismatched += 1;
        }
    }

    let mut violations = 0;
    let mut checked = 0;
    let cnn = ModelArch::new(ArchName::CnnBn, vec![1, 5, 5], vec![3, 3, 3], 4);
    let mlp = ModelArch::new(ArchName::MlpBn, vec![25], vec![8, 8, 8], 4);
    for (i, arch) in [mlp, cnn].iter().enumerate() {
        let model = init_params(arch, 40 + i as u64).unwrap();
        let mut r = Rng::seed_from_u64(40 + i as u64);
        for _ in 0..5 {
            let n = 1000;
            let eta = [0.0, 1e-3, 0.05, 0.2, 0.7][r.random_range(0..5)];
            let mut shape = vec![n];
            shape.extend(&arch.input_shape);
            let x = uniform(&mut r, &shape, 0.0, 1.0);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
            let xa = fgsm(&model, &x, &labels, &AttackConfig::new(eta)).unwrap();
            for (a, b) in x.data().iter().zip(xa.data()) {
                if !((b - a).abs() <= eta && (0.0..=1.0).contains(b)) {
                    violations += 1;
                }
            }
            checked += n;
        }
    }
    let ok = single_ok && nonneg_ok && profile_nonneg && mismatched == 0 && violations == 0 && checked >= 10_000;
    (
        ok,
        format!(
            "single-class gap 0: {single_ok}, gaps >= 0: {}, eta=0 bitwise equal {bitwise}/{}, FGSM bound/clip violations {violations} over {checked} samples",
            nonneg_ok && profile_nonneg,
            bitwise + mismatched
        ),
    )
}

fn exact_unlearning_pattern() -> (bool, String) {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::desk_default();
    cfg.methods.retain(|m| m.kind == MethodKind::Cf);
    cfg.attack_etas.clear();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let retrain: Vec<(f64, f64)> = report.runs_of("retrain").map(|r| (r.accuracy.forget_test, r.accuracy.retain_test)).collect();
    let retrain_ok = retrain.iter().filter(|(f, r)| *f <= 0.05 && *r >= 0.90).count();
    let cf: Vec<f64> = report.runs_of("cf").map(|r| r.accuracy.forget_test).collect();
    let cf_epochs = cfg.methods[0].epochs;
    let cf_ok = cf.iter().filter(|&&f| f <= 0.10).count();
    let ok = retrain_ok >= 4 && cf_ok == cf.len() && cf_epochs <= 50 && secs <= 180.0;
    (
        ok,
        format!(
            "retrain (forget-test, retain-test) {retrain:?} ok in {retrain_ok}/5; cf forget-test after {cf_epochs} epochs {cf:?} ok in {cf_ok}/5; {secs:.1} s of 180 s"
        ),
    )
}

fn method_identities() -> (bool, String) {
    let spec = SyntheticBlobSpec {
        classes: 4,
        per_class_n: 30,
        dim: 6,
        class_center_scale: 0.8,
        class_sigma: vec![0.1],
        seed: 8,
    };
    let train_set = make_blobs(&spec).unwrap();
    let test_set = make_blobs_test(&spec, 10).unwrap();
    let split = split_retain_forget(&train_set, &test_set, 1).unwrap();
    let arch = ModelArch::new(ArchName::MlpBn, vec![6], vec![8, 8, 8], 4);
    let adam = OptimizerConfig::adam(1e-2, 0.9, 5e-4);
    let original = train(init_params(&arch, 4).unwrap(), &train_set, &TrainConfig::new(10, 16, 4), &adam).unwrap().model;

    let sgd = OptimizerConfig::sgd(1e-2, 0.9, 5e-4);
    let cfg = TrainConfig::new(5, 16, 9);
    let rl = rl_unlearn(&original, &split, &cfg, &sgd, 31).unwrap();
    let salun = salun_unlearn(&original, &split, &cfg, &sgd, 1.0, 31).unwrap();
    let same_bits = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let salun_ok = same_bits(&rl.model.flat_params(), &salun.model.flat_params())
        && same_bits(&rl.audit.loss_curve, &salun.audit.loss_curve)
        && rl.model == salun.model;

    let keep: Vec<usize> = (0..train_set.len()).filter(|&i| train_set.labels()[i] != 1).collect();
    let no_forget = train_set.subset(&keep);
    let empty_split = split_retain_forget(&no_forget, &test_set, 1).unwrap();
    let cf = cf_unlearn(&original, &empty_split, &cfg, &adam).unwrap();
    let continued = train(original.clone(), &no_forget, &cfg, &adam).unwrap();
    let cf_ok = empty_split.forget_train.is_empty() && cf.model == continued.model && same_bits(&cf.audit.loss_curve, &continued.stats.loss_curve);

    let ctx = UnlearnContext { arch: &arch, original: &original, split: &split, seed: 4, init_seed: 4 };
    let retrain = run_method(&MethodSpec::new(MethodKind::Retrain, 5, 16, adam.clone()), &ctx).unwrap();
    let access = retrain.audit.access;
    let access_ok = access.forget_train == 0 && access.forget_test == 0 && access.retain_train > 0;
    (
        salun_ok && cf_ok && access_ok,
        format!(
            "salun(1.0) == rl bitwise: {salun_ok}; cf on empty forget == continued training: {cf_ok}; retrain forget access {} (retain {})",
            access.forget_train, access.retain_train
        ),
    )
}

fn conjecture_one(desk: &ExperimentReport) -> (bool, String) {
    let holds = desk.retrain_vs_rl.iter().filter(|c| c.retrain_preserves_better).count();
    let expected_flags: Vec<u64> = desk.retrain_vs_rl.iter().filter(|c| !c.retrain_preserves_better).map(|c| c.seed).collect();
    let pairs: Vec<String> = desk
        .retrain_vs_rl
        .iter()
        .map(|c| format!("s{} {:.4}<={:.4}", c.seed, c.retrain_max_deviation, c.rl_max_deviation))
        .collect();
    (
        holds >= 4 && desk.retrain_vs_rl.len() == 5 && desk.flagged_seeds == expected_flags,
        format!("retrain <= rl max deviation in {holds}/5 seeds [{}]; flagged seeds {:?}", pairs.join(", "), desk.flagged_seeds),
    )
}

fn conjecture_two(desk: &ExperimentReport) -> (bool, String) {
    let Some(c) = &desk.correlation else {
        return (false, "no correlation in report".into());
    };
    let methods: BTreeSet<&str> = desk.runs.iter().map(|r| r.model.as_str()).collect();
    let seeds: BTreeSet<u64> = desk.runs.iter().map(|r| r.seed).collect();
    let expected: Vec<(f64, f64)> = desk
        .runs
        .iter()
        .map(|r| {
            let eta = c.eta.unwrap();
            (r.preservation.max_deviation, r.robustness.adversarial.iter().find(|p| p.eta == eta).unwrap().accuracy)
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = c.pairs.iter().copied().unzip();
    let oracle = spearman_oracle(&xs, &ys);
    let diff = (oracle - c.value).abs();
    let ok = methods.len() >= 4 && seeds.len() >= 5 && c.pairs == expected && diff <= 1e-12;
    (
        ok,
        format!(
            "{} methods x {} seeds = {} pairs at eta {:?}; spearman {:.6} (degenerate {}), oracle diff {diff:.2e} (limit 1e-12)",
            methods.len(),
            seeds.len(),
            c.pairs.len(),
            c.eta,
            c.value,
            c.degenerate
        ),
    )
}

const ARTIFACTS: [&str; 8] = [
    REPORT_FILE,
    "tables/accuracy.csv",
    "tables/accuracy.txt",
    "tables/robustness.csv",
    "tables/robustness.txt",
    "tables/fairness.csv",
    "tables/fairness.txt",
    GAP_PLOT_FILE,
];

fn determinism(a: &Path) -> (bool, String) {
    let b = tempfile::tempdir().unwrap();
    run_experiment(&ExperimentConfig::desk_default(), b.path()).unwrap();
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.path().join(f)).ok() || !a.join(f).exists())
        .collect();
    (differing.is_empty(), format!("{} artifacts compared across two desk runs, differing {:?}", ARTIFACTS.len(), differing))
}

fn layer_subset(desk_dir: &Path) -> (bool, String) {
    let cfg = ExperimentConfig::desk_default();
    let (_, split) = cfg.load_data(Path::new(".")).unwrap();
    let original = load_model(desk_dir.join("checkpoints/seed-0/original.ckpt")).unwrap().model;
    let spec = cfg.methods.iter().find(|m| m.kind == MethodKind::Cf).unwrap().clone();
    let k = 2;
    let boundary = original.block_start(k).unwrap();
    let frozen_slots: Vec<_> = original.param_slots().into_iter().filter(|s| s.layer < boundary).collect();
    let before = original.flat_params();

    let mut frozen_spec = spec.clone();
    frozen_spec.freeze_k = Some(k);
    let run = |s: &MethodSpec| {
        let ctx = UnlearnContext { arch: &cfg.arch, original: &original, split: &split, seed: 0, init_seed: 0 };
        run_method(s, &ctx).unwrap()
    };
    let mut best_full = f64::INFINITY;
    let mut best_frozen = f64::INFINITY;
    let mut frozen_model = None;
    for _ in 0..3 {
        best_full = best_full.min(run(&spec).audit.wall_time_secs);
        let out = run(&frozen_spec);
        best_frozen = best_frozen.min(out.audit.wall_time_secs);
        frozen_model = Some(out.model);
    }
    let after = frozen_model.unwrap().flat_params();
    let frozen_count: usize = frozen_slots.iter().map(|s| s.len).sum();
    let changed_frozen = frozen_slots
        .iter()
        .flat_map(|s| s.offset..s.offset + s.len)
        .filter(|&i| before[i].to_bits() != after[i].to_bits())
        .count();
    let trained_changed = (0..before.len()).filter(|&i| before[i].to_bits() != after[i].to_bits()).count();
    let ok = frozen_count > 0 && changed_frozen == 0 && trained_changed > 0 && best_frozen < best_full;
    (
        ok,
        format!(
            "freeze_k={k}: {changed_frozen} of {frozen_count} prefix scalars changed ({trained_changed} later scalars moved); best of 3 wall time {best_frozen:.3} s vs full {best_full:.3} s"
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut outcomes = Vec::new();
    outcomes.push(criterion(1, "gradient correctness", gradient_correctness));
    outcomes.push(criterion(2, "class variance oracle", variance_oracle));

    let desk_started = Instant::now();
    let desk_dir = tempfile::tempdir().unwrap();
    let desk = run_experiment(&ExperimentConfig::desk_default(), desk_dir.path());
    println!("     desk experiment: {:.1} s", desk_started.elapsed().as_secs_f64());
    let desk = match desk {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL desk experiment: {e}");
            return ExitCode::FAILURE;
        }
    };

    outcomes.push(criterion(3, "metric exactness", || metric_exactness(&desk)));
    outcomes.push(criterion(4, "exact unlearning pattern", exact_unlearning_pattern));
    outcomes.push(criterion(5, "method identities", method_identities));
    outcomes.push(criterion(6, "retrain preserves gaps better than rl", || conjecture_one(&desk)));
    outcomes.push(criterion(7, "gap/robustness rank correlation", || conjecture_two(&desk)));
    outcomes.push(criterion(8, "determinism", || determinism(desk_dir.path())));
    outcomes.push(criterion(9, "layer-subset unlearning", || layer_subset(desk_dir.path())));
    let total = started.elapsed().as_secs_f64();
    outcomes.push(criterion(10, "full suite runtime", || (total <= 600.0, format!("{total:.1} s of 600 s"))));

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
