use super::conv::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-feature statistics of a batch-normalized input (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sign(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, kernel: Var, geometry: ConvGeometry },
    Reshape(Var),
    NchwToRows(Var, [usize; 4]),
    RowsToNchw(Var, [usize; 4]),
    GlobalAvgPool(Var, [usize; 4]),
    /// Column-wise normalization with batch statistics; `inv_std` per column.
    BatchNormalize { x: Var, inv_std: Vec<f64> },
    /// Row-wise normalization; `inv_std` per row.
    LayerNormalize { x: Var, inv_std: Vec<f64> },
    /// Column-wise normalization with fixed statistics.
    StatsNormalize { x: Var, inv_std: Vec<f64> },
    ColumnAffine { x: Var, gamma: Var, beta: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDivergence { student: Var, row_grad: Vec<f64>, temperature: f64 },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede the
/// nodes that consume them. A tape built with [`Tape::inference`] never
/// records backward rules. Tapes are single-threaded and meant to be
/// dropped (or [`cleared`](Tape::clear)) after each step.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn stable_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    row.iter().map(|&z| (z - max) / temperature - lse).collect()
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, kink_margin: f64::INFINITY }
    }

    /// A tape that stores values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape { recording: false, ..Tape::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.kink_margin = f64::INFINITY;
    }

    /// Smallest distance seen between an input and a non-differentiable point
    /// (relu/sign at 0, clamp bounds). Finite-difference checks reject
    /// samples whose perturbation could cross one of these kinks.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    /// Adds an input tensor. `requires_grad` is ignored on inference tapes.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node { value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, distance: f64) {
        self.kink_margin = self.kink_margin.min(distance.abs());
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().is_empty() {
            let s = tb.data()[0];
            return Ok(Tensor::from_parts(
                ta.shape().to_vec(),
                ta.data().iter().map(|&x| f(x, s)).collect(),
            ));
        }
        same_shape(name, ta, tb)?;
        Ok(Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    /// Elementwise sum. `b` may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        self.push("scale", out, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + s).collect());
        self.push("add_scalar", out, &[a], Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let margin = t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect());
        self.note_kink(margin);
        self.push("relu", out, &[a], Op::Relu(a))
    }

    /// Sign with `sign(0) = 0`. Its gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let margin = t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| sign(x)).collect());
        self.note_kink(margin);
        self.push("sign", out, &[a], Op::Sign(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::domain(format!("clamp bounds {lo} >= {hi}")));
        }
        let t = self.value(a);
        let margin = t
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min((x - lo).abs()).min((x - hi).abs()));
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x.clamp(lo, hi)).collect());
        self.note_kink(margin);
        self.push("clamp", out, &[a], Op::Clamp(a, lo, hi))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_parts(vec![m, n], matmul_kernel(ta.data(), tb.data(), m, k, n));
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// `x[n,d] + bias[d]`, row by row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let d = tb.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", out, &[x, bias], Op::AddBias(x, bias))
    }

    /// Cross-correlation of `input[n,c,h,w]` with `kernel[o,c,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let geometry = ConvGeometry::new(ti.shape(), tk.shape(), stride, padding)?;
        let data = conv::forward(&geometry, ti.data(), tk.data());
        let out = Tensor::from_parts(geometry.output_shape(), data);
        self.push("conv2d", out, &[input, kernel], Op::Conv2d { input, kernel, geometry })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, &[a], Op::Reshape(a))
    }

    fn dims4(&self, a: Var, op: &str) -> Result<[usize; 4]> {
        match *self.value(a).shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(format!("{op} expects [n,c,h,w], got {s:?}"))),
        }
    }

    /// `[n,c,h,w] -> [n*h*w, c]`: every spatial position becomes a row,
    /// sample-major then row-major over positions.
    pub fn nchw_to_rows(&mut self, a: Var) -> Result<Var> {
        let dims @ [n, c, h, w] = self.dims4(a, "nchw_to_rows")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..h * w {
                    data[(ni * h * w + p) * c + ci] = src[(ni * c + ci) * h * w + p];
                }
            }
        }
        let out = Tensor::from_parts(vec![n * h * w, c], data);
        self.push("nchw_to_rows", out, &[a], Op::NchwToRows(a, dims))
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, a: Var, dims: [usize; 4]) -> Result<Var> {
        let [n, c, h, w] = dims;
        if self.value(a).shape() != [n * h * w, c] {
            return Err(Error::shape(format!(
                "rows_to_nchw: {:?} does not match {dims:?}",
                self.value(a).shape()
            )));
        }
        let data = rows_to_nchw_data(self.value(a).data(), dims);
        let out = Tensor::from_parts(dims.to_vec(), data);
        self.push("rows_to_nchw", out, &[a], Op::RowsToNchw(a, dims))
    }

    /// Mean over spatial positions: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let dims @ [n, c, h, w] = self.dims4(a, "global_avg_pool")?;
        let hw = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        self.push("global_avg_pool", out, &[a], Op::GlobalAvgPool(a, dims))
    }

    fn matrix_dims(&self, a: Var, op: &str) -> Result<(usize, usize)> {
        match *self.value(a).shape() {
            [r, d] => Ok((r, d)),
            ref s => Err(Error::shape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    /// Normalizes every column of `x[n,d]` by its batch mean and biased
    /// variance. Returns the normalized (pre-affine) values and the stats.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, d) = self.matrix_dims(x, "batch_normalize")?;
        if n < 2 {
            return Err(Error::contract(format!(
                "batch normalization in train mode needs at least 2 rows, got {n}"
            )));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in src.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in src.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = src
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % d]) * inv_std[i % d])
            .collect();
        let out = Tensor::from_parts(vec![n, d], data);
        let var_out = self.push("batch_normalize", out, &[x], Op::BatchNormalize { x, inv_std })?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Normalizes every row of `x[n,d]` by its own mean and biased variance.
    pub fn layer_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "layer_normalize")?;
        if d < 2 {
            return Err(Error::contract(format!(
                "layer normalization needs at least 2 features, got {d}"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for row in src.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * is));
            inv_std.push(is);
        }
        let out = Tensor::from_parts(vec![n, d], data);
        self.push("layer_normalize", out, &[x], Op::LayerNormalize { x, inv_std })
    }

    /// Column-wise `(x - mean) / sqrt(var + eps)` with fixed statistics.
    pub fn stats_normalize(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "stats_normalize")?;
        if mean.len() != d || var.len() != d {
            return Err(Error::shape(format!(
                "stats_normalize: {d} columns but {} means and {} variances",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % d]) * inv_std[i % d])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("stats_normalize", out, &[x], Op::StatsNormalize { x, inv_std })
    }

    /// `x[r,d] * gamma[d] + beta[d]`, row by row.
    pub fn column_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "column_affine")?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(format!(
                "column_affine: gamma {:?} / beta {:?} for {d} columns",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("column_affine", out, &[x, gamma, beta], Op::ColumnAffine { x, gamma, beta })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
        }
        let t = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(c).zip(labels) {
            loss -= log_softmax(row, 1.0)[y];
            probs.extend(stable_softmax(row, 1.0));
        }
        let out = Tensor::scalar(loss / n as f64);
        self.push(
            "softmax_cross_entropy",
            out,
            &[logits],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Batch mean of `KL(softmax(student/T) || softmax(teacher/T))`. The
    /// teacher logits are constants.
    pub fn kl_divergence(&mut self, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
        }
        let (n, c) = self.matrix_dims(student, "kl_divergence")?;
        same_shape("kl_divergence", self.value(student), teacher)?;
        let t = self.value(student);
        let mut total = 0.0;
        let mut row_grad = Vec::with_capacity(n * c);
        for (zs, zt) in t.data().chunks(c).zip(teacher.data().chunks(c)) {
            let log_q = log_softmax(zs, temperature);
            let log_r = log_softmax(zt, temperature);
            let kl: f64 = log_q
                .iter()
                .zip(&log_r)
                .map(|(lq, lr)| lq.exp() * (lq - lr))
                .sum();
            total += kl;
            row_grad.extend(
                log_q
                    .iter()
                    .zip(&log_r)
                    .map(|(lq, lr)| lq.exp() * (lq - lr - kl)),
            );
        }
        let out = Tensor::scalar(total / n as f64);
        self.push(
            "kl_divergence",
            out,
            &[student],
            Op::KlDivergence { student, row_grad, temperature },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", out, &[a], Op::Mean(a))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Reduces a same-shape gradient onto `b`, which may be a rank-0 scalar.
    fn grad_for_operand(&self, b: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(b).shape().is_empty() {
            vec![g.iter().sum()]
        } else {
            g
        }
    }

    /// Populates gradients of every `requires_grad` node that `loss` depends on.
    /// Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("loss does not depend on any tensor requiring grad"));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: Vec<f64>) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let gb = self.grad_for_operand(b, g.clone());
                self.accumulate(a, g);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                let gb = self.grad_for_operand(b, neg);
                self.accumulate(a, g);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (ga, gb) = if tb.shape().is_empty() {
                    let s = tb.data()[0];
                    let ga = g.iter().map(|x| x * s).collect();
                    let gb = vec![g.iter().zip(ta.data()).map(|(x, y)| x * y).sum()];
                    (ga, gb)
                } else {
                    let ga = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    (ga, gb)
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, s) => self.accumulate(a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(a, g),
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Sign(a) => {
                let n = g.len();
                self.accumulate(a, vec![0.0; n]);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(x, &v)| if v > lo && v < hi { *x } else { 0.0 })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.requires_grad(a) {
                    // dA = dC * B^T
                    let bd = self.value(b).data();
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] = (0..n).map(|j| g[r * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    self.accumulate(a, ga);
                }
                if self.requires_grad(b) {
                    // dB = A^T * dC
                    let ad = self.value(a).data();
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::AddBias(x, bias) => {
                let d = self.value(bias).numel();
                let mut gb = vec![0.0; d];
                for (k, v) in g.iter().enumerate() {
                    gb[k % d] += v;
                }
                self.accumulate(x, g);
                self.accumulate(bias, gb);
            }
            Op::Conv2d { input, kernel, ref geometry } => {
                let (want_in, want_k) = (self.requires_grad(input), self.requires_grad(kernel));
                let (gi, gk) = conv::backward(
                    geometry,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    &g,
                    want_in,
                    want_k,
                );
                if let Some(gi) = gi {
                    self.accumulate(input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(kernel, gk);
                }
            }
            Op::NchwToRows(a, dims) => self.accumulate(a, rows_to_nchw_data(&g, dims)),
            Op::RowsToNchw(a, [n, c, h, w]) => {
                let mut ga = vec![0.0; g.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..h * w {
                            ga[(ni * h * w + p) * c + ci] = g[(ni * c + ci) * h * w + p];
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::GlobalAvgPool(a, [n, c, h, w]) => {
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * c * hw);
                for v in &g {
                    ga.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                self.accumulate(a, ga);
            }
            Op::BatchNormalize { x, ref inv_std } => {
                let xhat = self.nodes[i].value.data();
                let d = inv_std.len();
                let n = xhat.len() / d;
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for k in 0..xhat.len() {
                    sum_g[k % d] += g[k];
                    sum_gx[k % d] += g[k] * xhat[k];
                }
                let nf = n as f64;
                let gx = (0..xhat.len())
                    .map(|k| {
                        let j = k % d;
                        inv_std[j] / nf * (nf * g[k] - sum_g[j] - xhat[k] * sum_gx[j])
                    })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::LayerNormalize { x, ref inv_std } => {
                let xhat = self.nodes[i].value.data();
                let n = inv_std.len();
                let d = xhat.len() / n;
                let df = d as f64;
                let mut gx = Vec::with_capacity(xhat.len());
                for r in 0..n {
                    let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    gx.extend(
                        gr.iter()
                            .zip(xr)
                            .map(|(gv, xv)| inv_std[r] / df * (df * gv - sum_g - xv * sum_gx)),
                    );
                }
                self.accumulate(x, gx);
            }
            Op::StatsNormalize { x, ref inv_std } => {
                let d = inv_std.len();
                let gx = g.iter().enumerate().map(|(k, v)| v * inv_std[k % d]).collect();
                self.accumulate(x, gx);
            }
            Op::ColumnAffine { x, gamma, beta } => {
                let d = self.value(gamma).numel();
                let gd = self.value(gamma).data();
                let xd = self.value(x).data();
                let mut g_gamma = vec![0.0; d];
                let mut g_beta = vec![0.0; d];
                let mut gx = Vec::with_capacity(g.len());
                for (k, v) in g.iter().enumerate() {
                    g_gamma[k % d] += v * xd[k];
                    g_beta[k % d] += v;
                    gx.push(v * gd[k % d]);
                }
                self.accumulate(x, gx);
                self.accumulate(gamma, g_gamma);
                self.accumulate(beta, g_beta);
            }
            Op::SoftmaxCrossEntropy { logits, ref labels, ref probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let up = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * up).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * c + y] -= up;
                }
                self.accumulate(logits, gl);
            }
            Op::KlDivergence { student, ref row_grad, temperature } => {
                let n = self.value(student).rows();
                let up = g[0] / (n as f64 * temperature);
                self.accumulate(student, row_grad.iter().map(|v| v * up).collect());
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn rows_to_nchw_data(src: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut data = vec![0.0; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..h * w {
                data[(ni * c + ci) * h * w + p] = src[(ni * h * w + p) * c + ci];
            }
        }
    }
    data
}

/// `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
