//! One-sample maximum-likelihood estimation for Brownian motion tree models.
//!
//! A Brownian motion tree model (BMTM) is a centered Gaussian on the leaves of
//! a rooted tree whose covariance is linear in nonnegative edge variances.
//! The crate computes the exact one-sample MLE over a fixed tree, the closed
//! form MLE over the diagonally dominant M-matrix relaxation, comparison
//! estimators, and a Monte-Carlo risk harness.

pub mod contrast;
pub mod ddm;
pub mod error;
pub mod estimators;
pub mod format;
pub mod likelihood;
pub mod linalg;
pub mod mle;
pub mod numfmt;
pub mod serde_matrix;
pub mod simulate;
pub mod suites;
pub mod tree;

pub use error::{Error, Result};
pub use tree::{EdgeParams, NodeId, RootedTree, SparsityStructure};
