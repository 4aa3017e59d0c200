//! Generalized zero-shot semantic segmentation of 3D point clouds with
//! sparse mixture-of-experts layers in the feature generator and classifier.
//!
//! The pipeline has four stages: (1) a per-point feature extractor trained
//! jointly with a throwaway MoE classifier on seen classes, (2) an MoE
//! feature generator trained to match real seen-class features from
//! (noise, class prototype) pairs, (3) an MoE classifier trained on real
//! seen features plus generated unseen features, and (4) inference through
//! the extractor and classifier only.

pub mod classifier;
pub mod data;
pub mod backbone;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod pipeline;
pub mod prototypes;
pub mod verify;

pub use error::{GzslError, Result};
pub use numerics::Matrix;
