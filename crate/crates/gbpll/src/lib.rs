//! Granular-ball learning for imbalanced partial-label datasets.
//!
//! The crate trains a small classifier on data where every sample carries a
//! set of candidate labels (exactly one of them correct, hidden) and the
//! class sizes follow a long-tailed profile. The pipeline:
//!
//! 1. [`data`] synthesizes or loads long-tailed partially-labeled datasets.
//! 2. [`gbspace`] partitions the current feature space into granular balls
//!    by recursive 2-means splitting.
//! 3. [`gbgraph`] builds the ball-structured weighted graph and solves
//!    per-sample non-negative reconstruction weights.
//! 4. [`disambig`] maintains the label-confidence matrix and the estimated
//!    class prior.
//! 5. [`model`] is the differentiable classifier with the joint loss and
//!    manual gradients.
//! 6. [`trainer`] orchestrates two-phase training with periodic ball-space
//!    rebuilds.
//! 7. [`evalrep`] scores trained models and renders reports.
//!
//! Everything is deterministic per seed; see the README for the CLI surface.

pub mod data;
pub mod disambig;
pub mod error;
pub mod evalrep;
pub mod gbgraph;
pub mod gbspace;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
