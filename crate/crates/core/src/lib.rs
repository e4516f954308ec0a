//! Knowledge-to-response (K2R) dialogue pipelines.
//!
//! A K2R pipeline first asks a *knowledge* backend for an intermediate
//! knowledge sequence, then conditions a *response* backend on the dialogue
//! context plus that knowledge wrapped in special tokens. This crate holds
//! the composition, the generator abstraction it runs on, the training-data
//! and QA-dataset builders, and the metric suite used to score outputs.

pub mod backends;
pub mod chunker;
pub mod databuild;
pub mod episode;
pub mod forge;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod textnorm;

pub use backends::{
    Backend, BackendDescriptor, BackendError, BackendKind, Beam, GenerationRequest, Generator,
};
pub use episode::{DialogueEpisode, Persona, Turn};
pub use metrics::{MetricReport, MetricRow, RarityTable};
pub use pipeline::{K2RConfig, Pipeline, PipelineError, PipelineTrace, SpecialTokens, Step};
pub use textnorm::{normalize, TokenSequence};
