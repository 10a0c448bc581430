//! Classification metrics, precision-recall curves and the cross-validation
//! harness.
//!
//! Multi-class precision, recall and F1 are macro-averaged over classes. For
//! reference, the published SSL-FL-BT generalization accuracy is
//! [`PUBLISHED_GTA_ACCURACY`]; it was measured with a ResNet50 on real slides
//! and is not something this simulator can or tries to reproduce.

mod cv;
mod metrics;
mod pr;

pub use cv::{
    cross_validate, fold_partitions, fold_seed, score_dataset, CvRun, FoldCollector, FoldData,
    FoldReport, FoldResult,
};
pub use metrics::{
    class_precision_recall, confusion, gta, harmonic, mean_sd, metrics, ConfusionCounts,
    MetricSet, METRIC_NAMES,
};
pub use pr::{pr_curve, pr_curve_ap, softmax_rows, PrCurve, PrReport};

/// Mean GTA accuracy (95.74 %) reported for SSL-FL-BT. Citation only.
pub const PUBLISHED_GTA_ACCURACY: f64 = 0.9574;
