//! Conditional data selection for parallel corpora.
//!
//! Source and target sides of a small validation set are clustered
//! separately. A candidate pool is then subsampled so that its source
//! clusters follow the validation proportions and, within each source
//! cluster, its target clusters sit as close as possible to the validation
//! target distribution conditioned on that source cluster.

pub mod clustering;
pub mod corpus_io;
pub mod error;
pub mod pipeline;
pub mod selector;
pub mod stats;
pub mod synthgen;
pub mod vectorizer;
pub mod vectors;

pub use error::{CraftError, Result};
pub use vectors::VectorSet;
