use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Set when one side has no rank variance; `value` is then 0.
    pub degenerate: bool,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Correlation { value: 0.0, degenerate: true };
    }
    Correlation { value: (cov / (va * vb).sqrt()).clamp(-1.0, 1.0), degenerate: false }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!("{} and {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::domain(format!("rank correlation needs at least 3 pairs, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::domain("rank correlation of non-finite values"));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Rank correlation between each run's maximum fairness deviation and its
/// adversarial accuracy.
pub fn fairness_robustness_correlation(runs: &[(f64, f64)]) -> Result<Correlation> {
    let (dev, acc): (Vec<f64>, Vec<f64>) = runs.iter().copied().unzip();
    spearman(&dev, &acc)
}
