//! Text preprocessing: tokenisation, vocabularies, embedding tables and
//! masked id sequences.

mod processed;
mod tokenize;
mod vocab;

pub use processed::{MatchKey, ProcessedText, TextKind, DOCUMENT_CAP, QUERY_CAP};
pub use tokenize::tokenize;
pub use vocab::{
    load_embeddings, load_embeddings_with_seed, read_embeddings, write_embeddings, EmbeddingTable, SpecialIds,
    TokenId, Vocabulary, BIGRAM_SEPARATOR, DEFAULT_RESERVED_SEED, RESERVED_COUNT, RESERVED_INIT_RANGE,
};
