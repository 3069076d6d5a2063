//! Clusterpath estimation of Gaussian graphical models.
//!
//! Precision (or covariance) matrices are estimated under a penalty that
//! fuses variables with equal columns into clusters and shrinks off-diagonal
//! entries to zero. The estimator works entirely in block coordinates: a
//! model with `K` clusters is stored as `K` diagonal values and a symmetric
//! `K x K` matrix.

pub mod blockmodel;
pub mod clusterpath;
pub mod error;
pub mod io;
pub mod modelsel;
pub mod objective;
pub mod optimizer;
pub mod penalty;
pub mod scalar;
pub mod simbench;

pub use blockmodel::{BlockParameters, ClusterAssignment, CovarianceAggregates, PrecisionModel, Target};
pub use error::{CggmError, Result};
pub use penalty::{PenaltyConfig, SparseSymmetric, SparsityWeights};
pub use scalar::Real;

/// Double-precision model.
pub type Model = PrecisionModel<f64>;
/// Double-precision block parameters.
pub type Parameters = BlockParameters<f64>;
/// Double-precision penalty configuration.
pub type Penalty = PenaltyConfig<f64>;
/// Double-precision weight matrix.
pub type Weights = SparseSymmetric<f64>;
