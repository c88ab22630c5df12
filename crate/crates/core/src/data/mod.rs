//! Labeled datasets, synthetic blobs, IDX files and the retain/forget split.

mod blobs;
mod idx;

pub use blobs::{make_blobs, make_blobs_test, SyntheticBlobSpec};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Samples with values in `[0, 1]` and integer labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || width == 0 {
            return Err(Error::shape(format!("invalid sample shape {sample_shape:?}")));
        }
        if num_classes == 0 {
            return Err(Error::domain("dataset needs at least one class"));
        }
        if inputs.len() != labels.len() * width {
            return Err(Error::shape(format!(
                "{} labels of width {width} need {} inputs, got {}",
                labels.len(),
                labels.len() * width,
                inputs.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::domain(format!("label {y} out of range for {num_classes} classes")));
        }
        if let Some(i) = inputs.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!(
                "input value {} at flat index {i} outside [0, 1]",
                inputs[i]
            )));
        }
        Ok(LabeledDataset { sample_shape, inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.sample_width();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// All samples as a `[N, ..sample_shape]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::domain("empty dataset"));
        }
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, self.inputs.clone())
    }

    /// The selected samples, in order, as a `[k, ..sample_shape]` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sample_width());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_width());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        LabeledDataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: self.batch_labels(indices),
            num_classes: self.num_classes,
        }
    }

    /// Samples of `self` followed by those of `other`.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.sample_shape != other.sample_shape || self.num_classes != other.num_classes {
            return Err(Error::shape("concatenating incompatible datasets"));
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Training splits must contain every class at least once.
    pub fn check_class_coverage(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(c) => Err(Error::domain(format!("class {c} has no samples"))),
            None => Ok(()),
        }
    }

    /// SHA-256 over shape, class count, labels and input bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.sample_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for v in &self.inputs {
            h.update(v.to_bits().to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// One dataset partitioned by the forget class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplitDataset {
    pub forget_class: usize,
    pub retain_train: LabeledDataset,
    pub forget_train: LabeledDataset,
    pub retain_test: LabeledDataset,
    pub forget_test: LabeledDataset,
    /// Source indices of each part, in source order.
    pub retain_train_index: Vec<usize>,
    pub forget_train_index: Vec<usize>,
    pub retain_test_index: Vec<usize>,
    pub forget_test_index: Vec<usize>,
}

impl ClassSplitDataset {
    pub fn num_classes(&self) -> usize {
        self.retain_train.num_classes()
    }

    /// Classes other than the forget class.
    pub fn retain_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| c != self.forget_class).collect()
    }
}

fn partition(ds: &LabeledDataset, f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..ds.len()).partition(|&i| ds.labels()[i] != f)
}

/// Splits train and test sets into retain (`label != f`) and forget
/// (`label == f`) parts, preserving the original order within each part.
pub fn split_retain_forget(train: &LabeledDataset, test: &LabeledDataset, forget_class: usize) -> Result<ClassSplitDataset> {
    let c = train.num_classes();
    if test.num_classes() != c || test.sample_shape() != train.sample_shape() {
        return Err(Error::shape("train and test sets disagree on classes or sample shape"));
    }
    if forget_class >= c {
        return Err(Error::domain(format!(
            "forget class {forget_class} out of range for {c} classes"
        )));
    }
    let (rtr, ftr) = partition(train, forget_class);
    let (rte, fte) = partition(test, forget_class);
    Ok(ClassSplitDataset {
        forget_class,
        retain_train: train.subset(&rtr),
        forget_train: train.subset(&ftr),
        retain_test: test.subset(&rte),
        forget_test: test.subset(&fte),
        retain_train_index: rtr,
        forget_train_index: ftr,
        retain_test_index: rte,
        forget_test_index: fte,
    })
}

/// Index batches for one epoch.
///
/// With `shuffle`, the order is a permutation drawn from the
/// `(seed, epoch)` shuffle stream. Batches tile the order; the last one may
/// be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
