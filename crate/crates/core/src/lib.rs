//! Hierarchical online next-location prediction from mobile usage records.

pub mod geo;
pub mod ingest;
pub mod encode;
pub mod nn;
pub mod hier;
pub mod synth;
pub mod eval;
pub mod cli;
