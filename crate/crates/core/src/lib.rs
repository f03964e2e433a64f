//! Affective manifolds.
//!
//! An affective manifold is a low-dimensional embedding space split into named
//! emotional states (love, like, dislike, hate, ...) whose pairwise distances are
//! prescribed by a symmetric margin matrix. A small feedforward network is trained
//! on anchor/positive/negative triplets so that samples of one state collapse onto
//! each other while different states sit exactly their margin apart. A new signal
//! is assigned the state whose training centroid is nearest, and several manifolds
//! together form a "mind" that reacts to one signal on every manifold at once.
//!
//! Module map:
//!
//! - [`manifold`]: states, margin matrices, layouts, embeddability.
//! - [`network`]: dense/PReLU/dropout embedding network with hand-derived gradients.
//! - [`training`]: triplet sampling, the margin loss, Adam/SGD, continued training.
//! - [`inference`]: nearest-centroid state inference and the mind pipeline.
//! - [`data`]: IDX (MNIST) reader, label-to-state assignment, synthetic clusters.
//! - [`eval`]: margin reproduction metrics and SVG scatter plots.
//! - [`cli`]: the `affect` command-line tool.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod manifold;
pub mod network;
pub mod training;

pub use error::{Error, Result};
