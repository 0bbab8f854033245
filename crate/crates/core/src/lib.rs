//! Bag of Negatives (BoN): online hashing that supplies relevant negatives for
//! ranking-loss training.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithmic piece:
//!
//! * [`data`]: datasets of `(v, ID(v), features)` samples and a synthetic
//!   clustered-identity generator.
//! * [`embedding`]: a small trainable map from features to unit-norm embeddings
//!   with exact backpropagation, plus [`optim`] for SGD/Adam updates.
//! * [`losses`]: triplet, batch-hard, semi-hard and auto-encoder losses.
//! * [`hash`]: the online linear auto-encoder, running-mean thresholds and the
//!   dynamically updated hash table.
//! * [`samplers`]: mini-batch construction strategies, including the offline
//!   Spectral-Hashing and static-cluster baselines in [`offline`].
//! * [`metrics`]: mAP, non-zero-triplet fraction and the relevant-negative
//!   probability estimator.
//!
//! File formats, checkpoints, the training loop and the CLI live in the `bon`
//! crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod embedding;
mod error;
pub mod hash;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod offline;
pub mod optim;
pub mod samplers;

pub use crate::error::{Error, Result};
