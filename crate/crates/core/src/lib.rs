pub mod activations;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod hats;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod pruning;
pub mod ranking;
pub mod report;
pub mod stats;
pub mod tensor;
