use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Gaussian class clusters in `[0, 1]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBlobSpec {
    pub classes: usize,
    pub per_class_n: usize,
    pub dim: usize,
    /// Centers are drawn uniformly from `0.5 +- scale / 2` per coordinate.
    pub class_center_scale: f64,
    /// One standard deviation per class, or a single value shared by all.
    pub class_sigma: Vec<f64>,
    pub seed: u64,
}

impl SyntheticBlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::config("blobs need at least one class and one dimension"));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale <= 1.0) {
            return Err(Error::config("class_center_scale must be in (0, 1]"));
        }
        if self.class_sigma.len() != 1 && self.class_sigma.len() != self.classes {
            return Err(Error::config(format!(
                "class_sigma needs 1 or {} entries, got {}",
                self.classes,
                self.class_sigma.len()
            )));
        }
        if self.class_sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::config("class_sigma entries must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn sigma(&self, class: usize) -> f64 {
        if self.class_sigma.len() == 1 {
            self.class_sigma[0]
        } else {
            self.class_sigma[class]
        }
    }

    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut r = rng::stream(self.seed, Purpose::BlobCenters, 0);
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| 0.5 + self.class_center_scale * (r.random::<f64>() - 0.5))
                    .collect()
            })
            .collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if centers[i] == centers[j] {
                    return Err(Error::domain(format!("blob centers {i} and {j} coincide")));
                }
            }
        }
        Ok(centers)
    }

    fn generate(&self, per_class_n: usize, purpose: Purpose) -> Result<LabeledDataset> {
        let centers = self.centers()?;
        let mut inputs = Vec::with_capacity(self.classes * per_class_n * self.dim);
        let mut labels = Vec::with_capacity(self.classes * per_class_n);
        for (c, center) in centers.iter().enumerate() {
            let mut r = rng::stream(self.seed, purpose, c as u64);
            let sigma = self.sigma(c);
            for _ in 0..per_class_n {
                for &mu in center {
                    let z: f64 = r.sample(StandardNormal);
                    inputs.push((mu + sigma * z).clamp(0.0, 1.0));
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(vec![self.dim], inputs, labels, self.classes)
    }
}

/// Training samples: `per_class_n` per class, grouped by class.
pub fn make_blobs(spec: &SyntheticBlobSpec) -> Result<LabeledDataset> {
    spec.generate(spec.per_class_n, Purpose::BlobTrain)
}

/// Held-out samples around the same centers, from an independent stream.
pub fn make_blobs_test(spec: &SyntheticBlobSpec, per_class_n: usize) -> Result<LabeledDataset> {
    spec.generate(per_class_n, Purpose::BlobTest)
}
