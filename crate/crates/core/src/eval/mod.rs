//! Per-modality classifiers and generation-quality metrics.

mod classifier;
mod metrics;
mod report;

pub use classifier::{argmax, train_classifier, ClassifierConfig, ClassifierReport, FeatureClassifier};
pub use metrics::{
    conditional_precision_recall, fid, inception_score, matching_pseudo_precision, ClassScore, GaussianFit, MatchingScore,
    PrecisionRecall,
};
pub use report::{MetricReport, MetricRow};
