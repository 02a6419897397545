//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use matchtensor::io::{generate_synthetic, prepare_examples, SyntheticTaskSpec, TaskKind, TripletRecord};
use matchtensor::train::Example;
use matchtensor::EmbeddingTable;

/// A small seeded order-sensitive corpus: table, test records and their examples.
pub fn fixture() -> (Arc<EmbeddingTable>, Vec<TripletRecord>, Vec<Example>) {
    let mut spec = SyntheticTaskSpec::new(TaskKind::OrderSensitive, 7);
    spec.queries = [20, 5, 20];
    let corpus = generate_synthetic(&spec).expect("default spec is valid");
    let examples = prepare_examples(&corpus.dataset.test, &corpus.vocab);
    (Arc::new(corpus.table), corpus.dataset.test, examples)
}
