//! Evaluation metrics.

mod ot;
mod report;

pub use ot::{hungarian, wasserstein, MAX_OT_BATCH};
pub use report::{
    distance_mse, evaluate_model, exp_map_mse, reconstruction_error, subsample_wasserstein,
    EvalConfig, MetricReport,
};
