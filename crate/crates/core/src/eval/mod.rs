//! FID with pluggable feature extractors, the classifier harness, and
//! classification metrics.

mod classifier;
mod features;
mod fid;
mod metrics;

pub use self::classifier::{
    evaluate_classifier, train_classifier, train_classifier_from, ClassifierConfig, ClassifierModel,
};
pub use self::features::{extract_features, FeatureExtractor, FeatureTable, RandomConvNet, FEATURE_GAIN};
pub use self::fid::{fid, fid_stats, matrix_sqrt_psd, FidStats};
pub use self::metrics::{argmax, compute_metrics, roc_auc, ClassMetrics, MetricsReport, NUM_CLASSES};
