//! Vision Transformer fracture classification pipeline.
//!
//! The crate is organised bottom-up: [`tensor`] provides the numeric
//! substrate and autodiff tape, [`vit`] the classifier and attention
//! rollout, [`train`] the optimisation loop, [`metrics`] the evaluation
//! machinery, [`dec`] the deep-embedded-clustering evaluation of encoder
//! features, [`data`] ingestion and the synthetic dataset, and [`cascade`]
//! the hierarchical baseline.

pub mod cascade;
pub mod data;
pub mod dec;
pub mod error;
pub mod io;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
