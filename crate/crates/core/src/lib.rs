//! Query-adaptive weighted proper orthogonal decomposition for
//! gradient-based design optimization.
//!
//! The crate keeps a streaming truncated SVD of a time-weighted snapshot
//! matrix, localizes it around each query point with distance-based
//! snapshot weights (optionally enhanced with reduced-basis derivatives),
//! and embeds the resulting reduced solver in a constrained optimization
//! loop with residual-gated acceptance. The bundled high-dimensional
//! model is a damped cantilever mass-spring chain with per-element
//! thickness parameters.

pub mod basis;
pub mod bound;
pub mod config;
pub mod driver;
pub mod error;
pub mod hdm;
pub mod optimizer;
pub mod rom;
pub mod store;
pub mod svd;
pub mod weighting;

pub use basis::ReducedBasis;
pub use bound::BoundReport;
pub use config::{Method, RunConfig};
pub use driver::{Driver, RunReport, ShadowSummary};
pub use error::Error;
pub use hdm::{ChainProblem, HdmSolution};
pub use optimizer::{OptimizationReport, Schedule};
pub use rom::RomSolution;
pub use store::SnapshotStore;
pub use svd::TruncatedSvd;
pub use weighting::{DistanceProfile, WeightAssignment};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
