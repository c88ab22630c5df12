#![allow(dead_code)]

use fairgap::nn::{init_params, Mode, ModelArch};
use fairgap::rng::Rng;
use fairgap::tensor::{finite_diff_check, relative_error, Tape, Tensor, Var};
use fairgap::Result;
use rand::{Rng as _, SeedableRng};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Samples closer than this to a relu/sign/clamp kink are redrawn.
pub const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradStat {
    pub name: String,
    pub cases: usize,
    pub rejected: usize,
    pub max_error: f64,
}

impl GradStat {
    fn new(name: &str) -> Self {
        GradStat { name: name.to_string(), cases: 0, rejected: 0, max_error: 0.0 }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOLERANCE
    }
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(y * w)` for fixed pseudo-random weights `w`, so every output
/// element reaches the scalar with a distinct coefficient.
pub fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let mut r = Rng::seed_from_u64(seed);
    let w = t.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Scalar = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
type Case = Box<dyn Fn(&mut Rng) -> (Tensor, Scalar)>;

fn case(f: impl Fn(&mut Rng) -> (Tensor, Scalar) + 'static) -> Case {
    Box::new(f)
}

/// One entry per differentiable op and operand position.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    let binary = |which: &'static str, lhs: bool| -> Case {
        case(move |r| {
            let other = uniform(r, &[3, 4], -2.0, 2.0);
            let seed = r.random();
            let x = uniform(r, &[3, 4], -2.0, 2.0);
            let f: Scalar = Box::new(move |t, x| {
                let c = t.constant(other.clone());
                let (a, b) = if lhs { (x, c) } else { (c, x) };
                let y = match which {
                    "add" => t.add(a, b)?,
                    "sub" => t.sub(a, b)?,
                    _ => t.mul(a, b)?,
                };
                project(t, y, seed)
            });
            (x, f)
        })
    };
    vec![
        ("add (lhs)", binary("add", true)),
        ("add (rhs)", binary("add", false)),
        ("sub (lhs)", binary("sub", true)),
        ("sub (rhs)", binary("sub", false)),
        ("mul (lhs)", binary("mul", true)),
        ("mul (rhs)", binary("mul", false)),
        (
            "mul (shared operand)",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[2, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let y = t.mul(x, x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "scale",
            case(|r| {
                let (seed, s) = (r.random(), r.random_range(-2.0..2.0));
                (uniform(r, &[2, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let y = t.scale(x, s)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "add_scalar",
            case(|r| {
                let (seed, s) = (r.random(), r.random_range(-2.0..2.0));
                (uniform(r, &[2, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let y = t.add_scalar(x, s)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "relu",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.relu(x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "sign",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
                    let s = t.sign(x)?;
                    let y = t.mul(s, x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "clamp",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.clamp(x, -0.4, 0.5)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "matmul (lhs)",
            case(|r| {
                let b = uniform(r, &[4, 2], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
                    let bv = t.constant(b.clone());
                    let y = t.matmul(x, bv)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "matmul (rhs)",
            case(|r| {
                let a = uniform(r, &[3, 4], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[4, 2], -1.0, 1.0), Box::new(move |t, x| {
                    let av = t.constant(a.clone());
                    let y = t.matmul(av, x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "add_bias (input)",
            case(|r| {
                let b = uniform(r, &[4], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
                    let bv = t.constant(b.clone());
                    let y = t.add_bias(x, bv)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "add_bias (bias)",
            case(|r| {
                let a = uniform(r, &[3, 4], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[4], -1.0, 1.0), Box::new(move |t, x| {
                    let av = t.constant(a.clone());
                    let y = t.add_bias(av, x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "conv2d (input)",
            case(|r| {
                let k = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
                let (stride, pad) = if r.random::<bool>() { (1, 1) } else { (2, 0) };
                let seed = r.random();
                (uniform(r, &[2, 2, 5, 5], -1.0, 1.0), Box::new(move |t, x| {
                    let kv = t.constant(k.clone());
                    let y = t.conv2d(x, kv, stride, pad)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "conv2d (kernel)",
            case(|r| {
                let input = uniform(r, &[2, 2, 5, 5], -1.0, 1.0);
                let (stride, pad) = if r.random::<bool>() { (1, 1) } else { (2, 0) };
                let seed = r.random();
                (uniform(r, &[3, 2, 3, 3], -1.0, 1.0), Box::new(move |t, x| {
                    let iv = t.constant(input.clone());
                    let y = t.conv2d(iv, x, stride, pad)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "reshape",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[2, 6], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.reshape(x, vec![3, 4])?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "nchw_to_rows",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[2, 3, 2, 2], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.nchw_to_rows(x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "rows_to_nchw",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[8, 3], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.rows_to_nchw(x, [2, 3, 2, 2])?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "global_avg_pool",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[2, 3, 3, 3], -1.0, 1.0), Box::new(move |t, x| {
                    let y = t.global_avg_pool(x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "batch_normalize",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[5, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let (y, _) = t.batch_normalize(x, 1e-5)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "layer_normalize",
            case(|r| {
                let seed = r.random();
                (uniform(r, &[4, 5], -2.0, 2.0), Box::new(move |t, x| {
                    let y = t.layer_normalize(x, 1e-5)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "stats_normalize",
            case(|r| {
                let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..3).map(|_| r.random_range(0.1..2.0)).collect();
                let seed = r.random();
                (uniform(r, &[4, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let y = t.stats_normalize(x, &mean, &var, 1e-5)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "column_affine (input)",
            case(|r| {
                let g = uniform(r, &[3], -2.0, 2.0);
                let b = uniform(r, &[3], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[4, 3], -2.0, 2.0), Box::new(move |t, x| {
                    let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
                    let y = t.column_affine(x, gv, bv)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "column_affine (gamma)",
            case(|r| {
                let a = uniform(r, &[4, 3], -2.0, 2.0);
                let b = uniform(r, &[3], -1.0, 1.0);
                let seed = r.random();
                (uniform(r, &[3], -2.0, 2.0), Box::new(move |t, x| {
                    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
                    let y = t.column_affine(av, x, bv)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "column_affine (beta)",
            case(|r| {
                let a = uniform(r, &[4, 3], -2.0, 2.0);
                let g = uniform(r, &[3], -2.0, 2.0);
                let seed = r.random();
                (uniform(r, &[3], -1.0, 1.0), Box::new(move |t, x| {
                    let (av, gv) = (t.constant(a.clone()), t.constant(g.clone()));
                    let y = t.column_affine(av, gv, x)?;
                    project(t, y, seed)
                }))
            }),
        ),
        (
            "softmax_cross_entropy",
            case(|r| {
                let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
                (uniform(r, &[5, 4], -3.0, 3.0), Box::new(move |t, x| t.softmax_cross_entropy(x, &labels)))
            }),
        ),
        (
            "kl_divergence",
            case(|r| {
                let teacher = uniform(r, &[4, 3], -3.0, 3.0);
                let temp = [0.5, 1.0, 2.0][r.random_range(0..3)];
                (uniform(r, &[4, 3], -3.0, 3.0), Box::new(move |t, x| t.kl_divergence(x, &teacher, temp)))
            }),
        ),
        (
            "sum",
            case(|r| (uniform(r, &[3, 4], -2.0, 2.0), Box::new(|t, x| t.sum(x)))),
        ),
        (
            "mean",
            case(|r| (uniform(r, &[3, 4], -2.0, 2.0), Box::new(|t, x| t.mean(x)))),
        ),
    ]
}

/// Finite-difference check of one op entry over `cases` accepted samples.
pub fn check_op(name: &str, gen: &Case, cases: usize, seed: u64) -> Result<GradStat> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut stat = GradStat::new(name);
    while stat.cases < cases {
        assert!(stat.rejected < 20 * cases, "{name}: too many samples near kinks");
        let (x, f) = gen(&mut rng);
        let rep = finite_diff_check(|t, v| f(t, v), &x, FD_STEP)?;
        if rep.kink_margin < KINK_CLEARANCE {
            stat.rejected += 1;
            continue;
        }
        stat.max_error = stat.max_error.max(rep.max_rel_error);
        stat.cases += 1;
    }
    Ok(stat)
}

pub fn op_gradient_suite(cases: usize) -> Result<Vec<GradStat>> {
    op_cases()
        .iter()
        .enumerate()
        .map(|(i, (name, gen))| check_op(name, gen, cases, 1000 + i as u64))
        .collect()
}

fn model_loss(model: &fairgap::nn::InstrumentedModel, x: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
    let mut m = model.clone();
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = m.forward(&mut tape, xv, mode, false)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.value(loss).item()
}

/// Parameter gradients (train mode) and input gradients (train and eval
/// mode) of the cross-entropy of a randomly perturbed model.
pub fn model_gradient_suite(label: &str, arch: &ModelArch, batch: usize, cases: usize, seed: u64) -> Result<Vec<GradStat>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut params = GradStat::new(&format!("{label} parameters (train mode)"));
    let mut input_train = GradStat::new(&format!("{label} input (train mode)"));
    let mut input_eval = GradStat::new(&format!("{label} input (eval mode)"));
    let mut shape = vec![batch];
    shape.extend(&arch.input_shape);
    while params.cases < cases || input_train.cases < cases || input_eval.cases < cases {
        assert!(params.rejected + input_eval.rejected < 40 * cases, "{label}: too many samples near kinks");
        let mut model = init_params(arch, rng.random())?;
        let flat: Vec<f64> = model.flat_params().iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
        model.set_flat_params(&flat)?;
        let x = uniform(&mut rng, &shape, 0.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..arch.classes)).collect();

        if input_eval.cases < cases {
            let eval_rep = finite_diff_check(
                |t, v| {
                    let logits = model.forward_eval(t, v)?;
                    t.softmax_cross_entropy(logits, &labels)
                },
                &x,
                FD_STEP,
            )?;
            if eval_rep.kink_margin < KINK_CLEARANCE {
                input_eval.rejected += 1;
            } else {
                input_eval.max_error = input_eval.max_error.max(eval_rep.max_rel_error);
                input_eval.cases += 1;
            }
        }
        if params.cases >= cases && input_train.cases >= cases {
            continue;
        }

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let mut m = model.clone();
        let out = m.forward(&mut tape, xv, Mode::Train, false)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        tape.backward(loss)?;
        if tape.kink_margin() < KINK_CLEARANCE {
            params.rejected += 1;
            input_train.rejected += 1;
            continue;
        }
        let analytic: Vec<f64> = out
            .param_grads(&tape)
            .into_iter()
            .zip(model.params())
            .flat_map(|(g, p)| g.unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let mut probe = model.clone();
        let mut values = flat.clone();
        for (i, &a) in analytic.iter().enumerate() {
            values[i] = flat[i] + FD_STEP;
            probe.set_flat_params(&values)?;
            let plus = model_loss(&probe, &x, &labels, Mode::Train)?;
            values[i] = flat[i] - FD_STEP;
            probe.set_flat_params(&values)?;
            let minus = model_loss(&probe, &x, &labels, Mode::Train)?;
            values[i] = flat[i];
            params.max_error = params.max_error.max(relative_error(a, (plus - minus) / (2.0 * FD_STEP)));
        }
        params.cases += 1;

        let train_rep = finite_diff_check(
            |t, v| {
                let mut m = model.clone();
                let out = m.forward(t, v, Mode::Train, false)?;
                t.softmax_cross_entropy(out.logits, &labels)
            },
            &x,
            FD_STEP,
        )?;
        input_train.max_error = input_train.max_error.max(train_rep.max_rel_error);
        input_train.cases += 1;
    }
    Ok(vec![params, input_train, input_eval])
}

/// The three composite models of the gradient suite.
pub fn composite_models() -> Vec<(&'static str, ModelArch, usize)> {
    use fairgap::nn::ArchName;
    vec![
        ("mlp_bn", ModelArch::new(ArchName::MlpBn, vec![4], vec![5, 5, 5], 3), 6),
        ("cnn_bn", ModelArch::new(ArchName::CnnBn, vec![1, 4, 4], vec![2, 2, 2], 3), 3),
        ("mlp_ln", ModelArch::new(ArchName::MlpLn, vec![4], vec![5, 5, 5], 3), 6),
    ]
}

/// Mean of per-dimension variances from the explicit covariance matrix.
pub fn covariance_trace_oracle(data: &[f64], dim: usize) -> f64 {
    let n = data.len() / dim;
    let mean: Vec<f64> = (0..dim).map(|j| (0..n).map(|i| data[i * dim + j]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for i in 0..n {
        for a in 0..dim {
            for b in 0..dim {
                cov[a][b] += (data[i * dim + a] - mean[a]) * (data[i * dim + b] - mean[b]) / n as f64;
            }
        }
    }
    (0..dim).map(|a| cov[a][a]).sum::<f64>() / dim as f64
}

/// Spearman correlation from brute-force average ranks and the textbook
/// Pearson formula.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
