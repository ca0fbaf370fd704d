//! Hybrid generation, class balancing, and the five-arm experiment runner.

mod augment;
mod experiment;
mod generate;

pub use self::augment::{augment_manifest, relative_to, train_counts, AugmentationRun, OutputDir};
pub use self::generate::{hybrid_generate, GenerationConfig, GenerationRecord, Text2ImgCache};
pub use self::experiment::{
    default_target, prepare_data, reports_by_arm, run_all, run_experiment, ArmOutcome, DataConfig, DataSource, DiffusionConfig,
    EvalConfig, ExperimentArm, ExperimentConfig, FeatureSource, LoraConfig, SharedArtifacts,
};
