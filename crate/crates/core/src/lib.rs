//! Substructure landmark pooling for graph classification.
//!
//! Graphs are loaded in the TU text format, each node's k-hop neighbourhood
//! is summarised into a substructure vector, encoded into a latent space and
//! softly assigned to a shared set of landmarks. The per-graph interaction
//! between landmarks feeds a small classifier trained jointly with the
//! encoder and landmarks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coherence;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod grad;
pub mod landmarks;
pub mod model;
pub mod parallel;
pub mod pooling;
pub mod substructure;
pub mod train;

pub use dataset::{load_tu_dataset, DatasetBundle, Graph};
pub use error::{Result, SlimError};
pub use model::TrainConfig;
pub use parallel::Execution;
pub use substructure::{SubstructureConfig, Variant};
