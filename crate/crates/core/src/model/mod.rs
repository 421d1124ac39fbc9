//! The detector: backbone, voting, representative-point heads, training and inference.

pub mod backbone;
mod config;
mod detector;
mod experiment;
pub mod heads;
mod train;
pub mod voting;

pub use backbone::{height_feature, Backbone, SeedBatch};
pub use config::{
    DataSource, EvalConfig, HeadVariant, ModelConfig, RunConfig, SamplingStrategy, SyntheticData,
    TrainConfig, CONFIG_SCHEMA,
};
pub use detector::{fit_cloud, BatchForward, CheckpointMeta, Detector, LossBreakdown, Proposal};
pub use experiment::{
    ablation_table, evaluate_detector, load_dataset, run_ablation, run_experiment, synthetic_split,
    Arm, Dataset, ExperimentResult,
};
pub use heads::sample_rep_points;
pub use train::{train, MetricsRecord, TrainOptions, TrainOutcome};
