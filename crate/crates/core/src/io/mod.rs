//! Dataset files, synthetic corpora, run manifests and experiment helpers.

mod dataset;
mod experiment;
mod manifest;
mod synthetic;

pub use dataset::{load_dataset, parse_dataset, write_dataset, DatasetSplit, Document, Split, TripletRecord};
pub use experiment::{
    bm25_scores, format_delta_table, load_features, metrics_from_scores, model_bm25_ensemble, prepare_examples,
    relative_deltas, write_features, EnsembleRun, FeatureTable, MetricDelta, MetricsSnapshot, ENSEMBLE_FEATURES,
};
pub use manifest::{write_atomic, ModelSpec, RunManifest, Scorer, TensorEntry, MANIFEST_MAGIC, MANIFEST_VERSION};
pub use synthetic::{
    generate_synthetic, SyntheticCorpus, SyntheticTaskSpec, TaskKind, DOCUMENT_LENGTH, QUERY_LENGTH,
};
