//! Vision transformer classifier.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod patch;
pub mod rollout;

pub use config::ViTConfig;
pub use model::{mhsa, AttentionTrace, BatchForward, ModelVars, ViTModel};
pub use patch::{patchify, unpatchify};
pub use rollout::{attention_rollout, Heatmap, Rollout};
