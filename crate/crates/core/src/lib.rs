//! Multi-label text classification with a hierarchical attention encoder, a
//! pairwise-ranking (LSEP) label-scoring head and a label-count head.

pub mod corpus;
pub mod encoder;
pub mod heads;
pub mod inference;
pub mod metrics;
mod ops;
pub mod params;
pub mod preprocess;
pub mod synthetic;
pub mod trainer;
