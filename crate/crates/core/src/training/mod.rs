//! Optimizers, the training loop, training checkpoints and accuracy.

mod optim;
mod trainer;

pub use optim::{adam_step, sgd_step, Optimizer, OptimizerConfig, OptimizerKind, OptimizerState};
pub(crate) use trainer::accuracy_of;
pub use trainer::{
    evaluate_accuracy, loss_curve_csv, predict_dataset, train, FitStats, TrainConfig, TrainOutcome, Trainer,
    TrainingCheckpoint, TRAINING_CHECKPOINT_FORMAT, TRAINING_CHECKPOINT_VERSION,
};
