//! Unsupervised primitives used by the blind attacker.

pub mod dbscan;
pub mod ica;
pub mod tsne;

pub use dbscan::{dbscan, estimate_eps, ClusterLabeling, NOISE};
pub use ica::{fastica, whiten, MixingMatrix, Whitening};
pub use tsne::{tsne_embed, tsne_init, Embedding, TsneParams};
