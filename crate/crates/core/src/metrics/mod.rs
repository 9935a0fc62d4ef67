//! Classification reports with bootstrap intervals, and partition
//! similarity measures for clustering.

pub mod classification;
pub mod clustering;

pub use classification::{
    aggregate, bootstrap_ci, class_scores, classification_report, Aggregate, Aggregates, ClassMetrics,
    ConfusionMatrix, Estimate, MetricReport, BOOTSTRAP_RESAMPLES, CI_LEVEL, MIN_BOOTSTRAP_SAMPLES,
};
pub use clustering::{ari, clustering_accuracy, nmi};
