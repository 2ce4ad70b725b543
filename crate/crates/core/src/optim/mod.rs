//! Update rules, learning-rate scheduling, early stopping, and training.

mod history;
mod optimizer;
mod schedule;
mod train;

pub use history::{format_sig, EpochHistory, EpochRecord, HISTORY_HEADER};
pub use optimizer::{Optimizer, Rule};
pub use schedule::{Decision, EarlyStopping, Plateau, IMPROVEMENT};
pub use train::{
    evaluate, evaluate_loss, predict_dataset, report_from_probabilities, train, train_step, Dataset, Evaluation,
    TrainConfig, TrainOutcome,
};
