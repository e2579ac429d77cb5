//! Disentangled appearance/structure representation learning.
//!
//! A three-encoder VAE splits RGB images into an appearance code and a
//! structure code, tying the structure code to a paired depth modality
//! with a contrastive objective and decorrelating the two RGB codes with
//! an anticontrastive penalty. The crate ships the full desk-scale stack:
//! a reverse-mode f64 tensor engine, the encoder/decoder models, the four
//! loss terms, a procedural paired RGB/depth dataset, Adam training with
//! early stopping, and embedding-space diagnostics.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod losses;
pub mod models;
pub mod training;
