//! Checkpoint files.
//!
//! A checkpoint is a canonical JSON document (see [`crate::canonical`]) with
//! a `format` name and a `version`. Model checkpoints hold the architecture,
//! every parameter array, the batch-norm running statistics and the seeds
//! the model descends from. Floats are written with 17 significant digits,
//! so loading reproduces every bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::nn::InstrumentedModel;
use crate::training::{TrainingCheckpoint, TRAINING_CHECKPOINT_FORMAT, TRAINING_CHECKPOINT_VERSION};

pub const MODEL_CHECKPOINT_FORMAT: &str = "fairgap-model";
pub const MODEL_CHECKPOINT_VERSION: u32 = 1;

/// Seeds a model was produced from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedLineage {
    pub data_seed: u64,
    pub init_seed: u64,
    pub run_seed: u64,
    /// Unlearning method applied on top of the original model, if any.
    #[serde(default)]
    pub method: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub lineage: SeedLineage,
    pub model: InstrumentedModel,
}

impl ModelCheckpoint {
    pub fn new(model: InstrumentedModel, lineage: SeedLineage) -> Self {
        ModelCheckpoint {
            format: MODEL_CHECKPOINT_FORMAT.to_string(),
            version: MODEL_CHECKPOINT_VERSION,
            lineage,
            model,
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, canonical::to_string(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CheckpointNotFound(path.display().to_string()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    canonical::from_str(&text)
}

fn check_header(path: &Path, format: &str, version: u32, want_format: &str, want_version: u32) -> Result<()> {
    if format != want_format || version != want_version {
        return Err(Error::Serde(format!(
            "{}: expected {want_format} v{want_version}, found {format} v{version}",
            path.display()
        )));
    }
    Ok(())
}

pub fn save_model(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_json(ckpt, path.as_ref())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let ckpt: ModelCheckpoint = read_json(path)?;
    check_header(path, &ckpt.format, ckpt.version, MODEL_CHECKPOINT_FORMAT, MODEL_CHECKPOINT_VERSION)?;
    ckpt.model.arch().validate()?;
    Ok(ckpt)
}

pub fn save_training(ckpt: &TrainingCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_json(ckpt, path.as_ref())
}

pub fn load_training(path: impl AsRef<Path>) -> Result<TrainingCheckpoint> {
    let path = path.as_ref();
    let ckpt: TrainingCheckpoint = read_json(path)?;
    check_header(
        path,
        &ckpt.format,
        ckpt.version,
        TRAINING_CHECKPOINT_FORMAT,
        TRAINING_CHECKPOINT_VERSION,
    )?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchName, ModelArch, Mode};
    use crate::tensor::{Tape, Tensor};

    fn trained_model() -> InstrumentedModel {
        let arch = ModelArch::new(ArchName::CnnBn, vec![1, 3, 3], vec![2, 3, 2], 3);
        let mut m = init_params(&arch, 17).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 9], (0..36).map(|i| (i as f64 / 37.0).sqrt()).collect()).unwrap());
        m.forward(&mut tape, x, Mode::Train, false).unwrap();
        m
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let lineage = SeedLineage { data_seed: 1, init_seed: 2, run_seed: 3, method: Some("cf".into()) };
        let ckpt = ModelCheckpoint::new(trained_model(), lineage);
        save_model(&ckpt, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, ckpt);
        let bits = |m: &InstrumentedModel| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&ckpt.model));
        let first = std::fs::read(&path).unwrap();
        save_model(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn missing_file_is_checkpoint_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_model(dir.path().join("absent.ckpt")).unwrap_err();
        assert_eq!(err.kind(), "checkpoint_not_found");
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = ModelCheckpoint::new(trained_model(), SeedLineage::default());
        ckpt.version = 99;
        save_model(&ckpt, &path).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Serde(_))));
    }
}
