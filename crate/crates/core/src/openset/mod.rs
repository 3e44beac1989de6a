//! Downstream training, open-set recognition and the sequential evaluation
//! protocol.

pub mod classifier;
pub mod openmax;
pub mod protocol;
pub mod threshold;
pub mod weibull;

pub use classifier::{train_downstream, train_linear, LinearClassifier, TrainConfig};
pub use openmax::{
    fit_openmax, openmax_probabilities, revise_logits, OpenmaxParams, OpensetMode, OpensetModel, Prediction,
    DEFAULT_TAIL_SIZE,
};
pub use protocol::{
    calibrate_for_task, evaluate_sequence, evaluate_with, fit_opengc, map_score, mapped_truth, EvalConfig, Metrics,
    NodePredictor, OraclePredictor, PerformanceMatrix, Seeds, TrainedOpenset,
};
pub use threshold::{calibrate_threshold, is_flagged, rejected_count, DEFAULT_QUANTILE};
pub use weibull::{fit_fixed_shape, fit_weibull, WeibullModel};
