//! Classification and segmentation networks, training, evaluation and the
//! rotation-regime experiment.

mod config;
pub mod metrics;
mod network;
mod train;

pub use config::{
    ClassifierMode, NetworkConfig, RotationRegime, Task, TrainConfig, CLASSIFICATION_BATCH, CLASSIFICATION_POINTS,
    DEFAULT_LEARNING_RATE, DEFAULT_VALIDATION_FRACTION, SEGMENTATION_BATCH, SEGMENTATION_POINTS,
};
pub use metrics::Metrics;
pub use network::{
    argmax, classify_forward, segment_forward, ClassOutput, ClassificationNet, CloudGeometry, Model, Prediction,
    SegmentationNet, StepStats, CONFIG_KEY, EVAL_BATCH,
};
pub use train::{
    evaluate, rotate_all, run_experiment, train, write_file, write_history_csv, write_metrics_csv, EpochMetrics,
    ExperimentResult, RegimeResult, TrainOutcome, CSV_SCHEMA,
};
