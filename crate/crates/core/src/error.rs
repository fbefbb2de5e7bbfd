use thiserror::Error;

use crate::tree::NodeId;

/// Errors produced by the estimation routines.
///
/// Every variant has a stable machine-readable name (see [`Error::kind`]) that
/// the command-line driver prints on failure.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("node {node} has degree {degree}: {reason}")]
    DegreeViolation {
        node: NodeId,
        degree: usize,
        reason: &'static str,
    },
    #[error("parent pointers form a cycle through node {node}")]
    CycleDetected { node: NodeId },
    #[error("node {node} does not reach the root")]
    Disconnected { node: NodeId },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown leaf {0}")]
    UnknownLeaf(usize),
    #[error("sparsity structure names node {0}, which has no parent edge in the tree")]
    InvalidSparsity(NodeId),
    #[error("sparsity structure is not fully observed")]
    NotFullyObserved,
    #[error("invalid edge parameters: {0}")]
    InvalidParams(String),
    #[error("{what} is too large (size {size}, limit {limit})")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },
    #[error("{what} needs at least {min} entries, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("data entries {first} and {second} are equal")]
    DuplicateValue { first: usize, second: usize },
    #[error("data entry {index} is zero")]
    ZeroValue { index: usize },
    #[error("data entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not a diagonally dominant M-matrix")]
    NotDdm,
    #[error("matrix is not the Laplacian of a connected graph: {0}")]
    NotLaplacian(String),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("weight matrix is invalid: {0}")]
    InvalidWeights(String),
    #[error("no spanning tree has positive weight")]
    ZeroTotal,
    #[error("support graph of the weight matrix is disconnected")]
    DisconnectedSupport,
    #[error("expected {expected} strictly negative eigenvalues, found {found}")]
    SpectrumViolation { expected: usize, found: usize },
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("covariance matrix is zero")]
    ZeroCovariance,
    #[error("dense log-likelihood {dense} disagrees with closed form {closed}")]
    LikelihoodMismatch { dense: f64, closed: f64 },
    #[error("no iteration budget left after {iterations} iterations (KKT residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("contrast data has duplicate or zero entries: {0}")]
    DegenerateContrast(String),
    #[error("data has no pair of equal entries")]
    NoDuplicate,
    #[error("shrinkage divisor for eigenvalue {index} is zero")]
    ZeroDivisor { index: usize },
    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

impl Error {
    /// Stable identifier for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegreeViolation { .. } => "DegreeViolation",
            Error::CycleDetected { .. } => "CycleDetected",
            Error::Disconnected { .. } => "Disconnected",
            Error::InvalidTree(_) => "InvalidTree",
            Error::UnknownNode(_) => "UnknownNode",
            Error::UnknownLeaf(_) => "UnknownLeaf",
            Error::InvalidSparsity(_) => "InvalidSparsity",
            Error::NotFullyObserved => "NotFullyObserved",
            Error::InvalidParams(_) => "InvalidParams",
            Error::TooLarge { .. } => "TooLarge",
            Error::TooSmall { .. } => "TooSmall",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DuplicateValue { .. } => "DuplicateValue",
            Error::ZeroValue { .. } => "ZeroValue",
            Error::NonFinite { .. } => "NonFinite",
            Error::NotPositiveDefinite => "NotPositiveDefinite",
            Error::NotDdm => "NotDDM",
            Error::NotLaplacian(_) => "NotLaplacian",
            Error::NotSymmetric => "NotSymmetric",
            Error::InvalidWeights(_) => "InvalidWeights",
            Error::ZeroTotal => "ZeroTotal",
            Error::DisconnectedSupport => "DisconnectedSupport",
            Error::SpectrumViolation { .. } => "SpectrumViolation",
            Error::SingularCovariance => "SingularCovariance",
            Error::ZeroCovariance => "ZeroCovariance",
            Error::LikelihoodMismatch { .. } => "LikelihoodMismatch",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::DegenerateContrast(_) => "DegenerateContrast",
            Error::NoDuplicate => "NoDuplicate",
            Error::ZeroDivisor { .. } => "ZeroDivisor",
            Error::UnknownEstimator(_) => "UnknownEstimator",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Parse { .. } => "ParseError",
        }
    }

    /// True for tree-structure validation failures.
    pub fn is_invalid_tree(&self) -> bool {
        matches!(
            self,
            Error::DegreeViolation { .. }
                | Error::CycleDetected { .. }
                | Error::Disconnected { .. }
                | Error::InvalidTree(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
