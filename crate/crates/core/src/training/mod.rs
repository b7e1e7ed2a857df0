//! Composite objective, RAdam, subject-agnostic mini-batching and the fit loop.

mod config;
mod fit;
mod objective;
mod optimizer;


pub use config::{LossWeights, TrainConfig, Variant};
pub use fit::{
    evaluate, fit, make_minibatches, predict, write_history, EpochRecord, FitResult, HISTORY_HEADER,
};
pub use objective::{compute_objective, l2_penalty, total_objective, LossTerms};
pub use optimizer::RAdam;
