//! Self-optimizing adaptation engine: a small task model with low-rank
//! adapters, a convolutional hyper-decoder that generates adapters from prompt
//! embeddings, strategy executors, and a multi-level reward-filtered loop that
//! proposes, validates and archives adaptation strategies.

mod binio;

pub mod codec;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kb;
pub mod meta;
pub mod select;
pub mod substrate;
pub mod tensor;

pub use error::{Result, SolarError};
pub use substrate::{LoraAdapter, Sample, TaskModel};
pub use tensor::Tensor;
