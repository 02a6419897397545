//! Neural relevance ranking with interaction-based and representation-based
//! scorers.
//!
//! The crate covers the whole pipeline of a desk-scale ranking experiment:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape;
//! - [`text`]: tokenisation, vocabularies and frozen embedding tables;
//! - [`encoders`]: bi-LSTM and CNN sequence encoders with input/state projections;
//! - [`models`]: the Match-Tensor scorer, the siamese SSM scorer and their hybrids;
//! - [`baselines`]: BM25 and gradient-boosted tree ensembles;
//! - [`train`]: Adam training, random search, training-size sweeps and
//!   graded-relevance metrics;
//! - [`io`]: triplet datasets, synthetic task generation, run manifests and
//!   line-delimited reports.

pub mod baselines;
pub mod encoders;
mod error;
pub mod io;
pub mod models;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, OpKind, Result};
pub use encoders::EncoderKind;
pub use models::{Architecture, ModelConfig, RankingModel};
pub use tensor::{Mode, Tensor};
pub use text::{EmbeddingTable, ProcessedText, Vocabulary};
pub use train::{RelevanceGrade, TrainingConfig};
