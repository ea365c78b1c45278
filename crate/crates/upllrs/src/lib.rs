//! Unreliable partial label learning with recursive separation.
//!
//! Each training instance carries a candidate label set that may or may
//! not contain the true label. The pipeline here:
//!
//! 1. synthesizes or loads a dataset and corrupts it (flip-then-partial,
//!    with unreliable rate `mu` and partial rate `eta`, split 4:1:1);
//! 2. recursively separates the training set into reliable and
//!    unreliable subsets by repeated short trainings and high-loss
//!    exclusion, stopping on validation patience;
//! 3. trains the final classifier on the reliable subset with weighted
//!    cross-entropy disambiguation, pulling confident unreliable
//!    instances back in as pseudo-labeled samples (general solution), or
//!    with consistency regularization over noise-augmented views plus a
//!    weak/strong masked cross-entropy on the unreliable pool (augmented
//!    solution);
//! 4. exports audits, loss-decile histograms, purity curves, and
//!    per-epoch metrics for every run.
//!
//! The numeric core is a small `f64` MLP with hand-derived gradients for
//! every loss, SGD with momentum and weight decay, and cosine
//! learning-rate decay. Everything is seeded: identical seeds give
//! byte-identical artifacts.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod seeding;
pub mod separation;
pub mod stopping;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
