//! Deep embedded clustering of encoder feature vectors: autoencoder
//! pretraining, kmeans++ initialisation and Student's-t refinement.

pub mod autoencoder;
pub mod cluster;
pub mod kmeans;

pub use autoencoder::{Activation, Autoencoder, Dense, PretrainConfig};
pub use cluster::{
    dec_train, hard_assignments, soft_assign, target_distribution, write_assignments, DecConfig, DecOutcome,
    DecRecord, ALPHA,
};
pub use kmeans::{kmeans_pp, KMeans};
