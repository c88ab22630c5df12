pub mod canonical;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unlearning;

pub use error::{Error, Result};
