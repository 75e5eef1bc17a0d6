//! Training-free consistent story generation on a toy scale-wise
//! autoregressive engine.
//!
//! The pipeline: parse a story, encode prompts and share the identity block
//! across the story, run coarse-to-fine generation in batches anchored on the
//! first prompt, inject the anchor's attention keys and blended values at
//! early scales, and mirror the blend on the unconditional guidance branch.

pub mod cli;
pub mod config;
pub mod error;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod orchestrator;
pub mod prompt;
pub mod rng;
pub mod scalewise;
pub mod transformer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use guidance::{AlphaScope, GuidanceConfig, GuidanceHook};
pub use image::{ImageRaster, Mask};
pub use metrics::{evaluate_run, harmonic_score, EvaluationReport, ScoreSet};
pub use orchestrator::{
    generate_story, plan_batches, Engine, GenerationConfig, RunManifest, StoryOutput,
};
pub use prompt::{
    apply_identity_replacement, parse_story_spec, EmbeddingBatch, PromptEncoder, StorySpec,
};
pub use scalewise::{FeatureMap, Grid, ResidualMap, ScaleSchedule};
pub use transformer::{init_model, ModelDims, ModelParams};
