//! Regression metrics, circular fingerprints, Tanimoto similarity and
//! accuracy binned by similarity to the training set.

mod fingerprint;
mod metrics;
mod similarity;

pub use fingerprint::{fingerprint, tanimoto, Fingerprint, DEFAULT_RADIUS, DEFAULT_WIDTH};
pub use metrics::{regression_metrics, TaskMetrics};
pub use similarity::{similarity_report, SimilarityBin, SimilarityReport, MIN_BIN_FOR_R2};
