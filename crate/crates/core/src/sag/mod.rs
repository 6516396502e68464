//! Minimal sufficient explanations (MSEs) and structured attention graphs.
//!
//! An MSE is a set of grid patches which, kept while everything else is
//! replaced by the baseline, preserves at least `τ` of the full-image
//! confidence, and no smaller subset of which does. [`beam_search_mse`] finds
//! them level by level; [`exhaustive_mse`] enumerates every subset of small
//! grids and serves as its oracle. [`build_sag`] arranges diverse MSEs and
//! their one- and two-patch reductions into a DAG.

mod graph;
mod oracle;
mod search;
mod stats;

pub use graph::{build_sag, GridDims, Sag, SagEdge, SagNode};
pub use oracle::PlantedOracle;
pub use search::{
    beam_search_mse, confidence_of, diverse_roots, exhaustive_mse, Evaluator, MseRecord, SearchConfig,
    EXHAUSTIVE_PATCH_CAP,
};
pub use stats::{mse_statistics, MseStatistics};
