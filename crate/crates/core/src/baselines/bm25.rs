use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && (0.0..=1.0).contains(&b)) {
            return Err(Error::InvalidArgument(format!("bm25 needs k1 >= 0 and 0 <= b <= 1, got k1={k1} b={b}")));
        }
        Ok(Self { k1, b })
    }
}

/// Document frequencies and length statistics of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    df: HashMap<String, usize>,
    docs: usize,
    avgdl: f64,
}

impl CorpusStats {
    pub fn from_documents<'a, I>(documents: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        let mut total = 0usize;
        for doc in documents {
            docs += 1;
            total += doc.len();
            let unique: HashSet<&String> = doc.iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Empty("bm25 corpus has no documents".into()));
        }
        if total == 0 {
            return Err(Error::Empty("bm25 corpus has no tokens".into()));
        }
        Ok(Self { df, docs, avgdl: total as f64 / docs as f64 })
    }

    pub fn document_count(&self) -> usize {
        self.docs
    }

    pub fn average_length(&self) -> f64 {
        self.avgdl
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of `doc` for the distinct terms of `query`.
pub fn bm25_score(query: &[String], doc: &[String], stats: &CorpusStats, params: Bm25Params) -> f64 {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let norm = params.k1 * (1.0 - params.b + params.b * doc.len() as f64 / stats.avgdl);
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for t in query {
        if !seen.insert(t.as_str()) {
            continue;
        }
        let Some(&f) = tf.get(t.as_str()) else { continue };
        let f = f as f64;
        score += stats.idf(t) * f * (params.k1 + 1.0) / (f + norm);
    }
    score
}
