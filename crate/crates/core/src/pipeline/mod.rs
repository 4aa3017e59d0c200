//! End-to-end orchestration: run configuration, the three training stages,
//! evaluation, checkpointing, and seeding.

pub mod checkpoint;
pub mod config;
pub mod seed;
pub mod stages;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataSource, PrototypeSource, RunConfig, SceneConfig};
pub use seed::{derive_seed, splitmix64};
pub use stages::{
    batch_accuracy, build_prototypes, evaluation_frames, load_backbone, load_classifier,
    load_generator, real_seen_features, run_all, run_eval, run_stage1, run_stage2, run_stage3,
    training_frames, BACKBONE_CKPT, CLASSIFIER_CKPT, GENERATOR_CKPT,
};
