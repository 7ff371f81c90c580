//! Nearest-neighbor translation memory with interpolated decoding, the
//! retrieval-induced implicit update on the output projection layer, and
//! explicit output-projection fine-tuning with matching analysis tooling.

pub mod analysis;
pub mod datastore;
pub mod error;
pub mod finetune;
pub mod io;
pub mod meta;
pub mod prediction;
pub mod synth;

pub use datastore::{Datastore, Metric, Neighbor, NeighborSet};
pub use error::{Error, Result};
pub use prediction::{Hyper, ProbVector, Projection, ScoreVariant, ScoredToken};
