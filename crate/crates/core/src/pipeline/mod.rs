//! Orchestration: configuration, frozen features, both training stages,
//! adaptation strategies, inference and evaluation.

pub mod config;
pub mod estimate;
pub mod features;
pub mod stage1;

pub use config::{EvalConfig, Precision, RunConfig, Stage1Config, Stage2Config};
pub use estimate::{estimate_motion, motion_error, MotionEstimate, MAX_MOTION_ERROR};
pub use features::{FeatureStore, VideoFeatures};
pub use stage1::{smoothed, Stage1Model, Stage1Trainer, STAGE1_KIND};
pub mod stage2;
pub use stage2::{Stage2Data, Stage2Model, Stage2Trainer, STAGE2_KIND};
pub mod strategy;
pub use strategy::{
    adapt_motion, select_examples, AdaptRequest, AdaptationStrategy, DatabaseEntry, MotionDatabase,
};
pub mod eval;
pub use eval::{
    ablate, ablation_strategies, build_index, evaluate, heldout_split, EvalRecord, EvalReport,
    EvalRow, InferOutput, MotionRag,
};
pub mod workspace;
pub use workspace::{load_stage1, load_stage2, Workspace};
