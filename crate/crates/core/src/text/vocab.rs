use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TokenId = u32;

/// Seed for the rows of reserved tokens when none is given.
pub const DEFAULT_RESERVED_SEED: u64 = 0x5eed_0f_7ab1e;
/// Reserved rows are drawn uniformly from `±RESERVED_INIT_RANGE`.
pub const RESERVED_INIT_RANGE: f64 = 0.05;
/// Separator joining the two halves of a bigram phrase in the vocabulary.
pub const BIGRAM_SEPARATOR: char = '_';

/// Reserved token ids, appended after the regular vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub oov: TokenId,
    pub pad: TokenId,
    pub start: TokenId,
    pub end: TokenId,
    pub field_boundary: TokenId,
}

pub const RESERVED_COUNT: usize = 5;
const RESERVED_NAMES: [&str; RESERVED_COUNT] = ["<oov>", "<pad>", "<start>", "<end>", "<field>"];

/// Dense token-id mapping with five reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: SpecialIds,
    bigrams: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens in order; reserved ids follow.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            let t = t.into();
            let id = list.len() as TokenId;
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
            list.push(t);
        }
        let base = list.len() as TokenId;
        list.extend(RESERVED_NAMES.iter().map(|s| s.to_string()));
        Ok(Self {
            tokens: list,
            index,
            special: SpecialIds {
                oov: base,
                pad: base + 1,
                start: base + 2,
                end: base + 3,
                field_boundary: base + 4,
            },
            bigrams: false,
        })
    }

    /// Enables greedy merging of adjacent tokens into `a_b` bigram entries.
    pub fn with_bigrams(mut self, enabled: bool) -> Self {
        self.bigrams = enabled;
        self
    }

    pub fn bigrams_enabled(&self) -> bool {
        self.bigrams
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of regular (non-reserved) tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.len() - RESERVED_COUNT
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id >= self.special.oov
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Regular tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[..self.regular_len()]
    }

    /// Id of `token`, or the OOV id.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(self.special.oov)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Maps tokens to ids, merging adjacent pairs greedily when bigrams are
    /// enabled. Returns `(id, surface)` pairs; the surface of a merged pair is
    /// the joined phrase.
    pub fn lookup(&self, tokens: &[String]) -> Vec<(TokenId, String)> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            if self.bigrams && i + 1 < tokens.len() {
                let phrase = format!("{}{BIGRAM_SEPARATOR}{}", tokens[i], tokens[i + 1]);
                if let Some(&id) = self.index.get(&phrase) {
                    out.push((id, phrase));
                    i += 2;
                    continue;
                }
            }
            out.push((self.id(&tokens[i]), tokens[i].clone()));
            i += 1;
        }
        out
    }
}

/// Frozen `vocab x dim` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::InvalidArgument(format!("embedding matrix must be rank 2, got {:?}", matrix.shape())));
        }
        Ok(Self { matrix })
    }

    /// Builds the table for `vocab` from the rows of its regular tokens,
    /// appending seeded rows for the reserved ids (zeros for PAD).
    pub fn with_reserved_rows(vocab: &Vocabulary, regular: Vec<f64>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || regular.len() != vocab.regular_len() * dim {
            return Err(Error::InvalidArgument("embedding rows do not match the vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = regular;
        for id in vocab.regular_len()..vocab.len() {
            if id as TokenId == vocab.special().pad {
                values.extend(std::iter::repeat_n(0.0, dim));
            } else {
                values.extend((0..dim).map(|_| rng.gen_range(-RESERVED_INIT_RANGE..=RESERVED_INIT_RANGE)));
            }
        }
        Self::new(Tensor::new([vocab.len(), dim], values)?)
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        let d = self.dim();
        &self.matrix.values()[id as usize * d..(id as usize + 1) * d]
    }

    /// Stacks the rows for `ids` into a `[len, dim]` tensor.
    pub fn gather(&self, ids: &[TokenId]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            if id as usize >= self.rows() {
                return Err(Error::InvalidArgument(format!("token id {id} outside the embedding table")));
            }
            values.extend_from_slice(self.row(id));
        }
        Tensor::new([ids.len(), self.dim()], values)
    }
}

/// Loads a textual embedding file: a `<vocab_size> <dim>` header followed by
/// one `token v1 .. v_dim` line per token.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vocabulary, EmbeddingTable)> {
    load_embeddings_with_seed(path, DEFAULT_RESERVED_SEED)
}

pub fn load_embeddings_with_seed(path: impl AsRef<Path>, seed: u64) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_embeddings(BufReader::new(file), &path.display().to_string(), seed)
}

pub fn read_embeddings<R: BufRead>(reader: R, source: &str, seed: u64) -> Result<(Vocabulary, EmbeddingTable)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::parse(source, 1, "missing header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields[..] {
        [a, b] => match (a.parse::<usize>(), b.parse::<usize>()) {
            (Ok(c), Ok(d)) if d > 0 => (c, d),
            _ => return Err(Error::parse(source, 1, format!("malformed header {header:?}"))),
        },
        _ => return Err(Error::parse(source, 1, format!("header must be \"<vocab_size> <dim>\", got {header:?}"))),
    };
    let mut tokens = Vec::with_capacity(count);
    let mut seen = HashMap::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let row: Vec<&str> = parts.collect();
        if row.len() != dim {
            return Err(Error::parse(source, line_no, format!("token {token:?} has {} values, expected {dim}", row.len())));
        }
        for v in row {
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => values.push(x),
                _ => return Err(Error::parse(source, line_no, format!("invalid number {v:?}"))),
            }
        }
        if let Some(prev) = seen.insert(token.clone(), line_no) {
            return Err(Error::parse(source, line_no, format!("duplicate token {token:?} (first on line {prev})")));
        }
        tokens.push(token);
    }
    if tokens.len() != count {
        return Err(Error::parse(source, 1, format!("header declares {count} tokens but the file has {}", tokens.len())));
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let table = EmbeddingTable::with_reserved_rows(&vocab, values, dim, seed)?;
    Ok((vocab, table))
}

/// Writes the regular rows of `table` in the textual embedding format.
pub fn write_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{} {}", vocab.regular_len(), table.dim())?;
    for (id, token) in vocab.regular_tokens().iter().enumerate() {
        write!(out, "{token}")?;
        for v in table.row(id as TokenId) {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    crate::io::write_atomic(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<(Vocabulary, EmbeddingTable)> {
        read_embeddings(text.as_bytes(), "test.vec", 1)
    }

    #[test]
    fn two_token_file_gets_reserved_rows() {
        let (vocab, table) = read("2 4\nfoo 1 2 3 4\nbar 5 6 7 8\n").unwrap();
        assert_eq!(vocab.len(), 2 + RESERVED_COUNT);
        assert_eq!(table.matrix().shape(), &[7, 4]);
        assert_eq!(table.row(vocab.id("bar")), &[5.0, 6.0, 7.0, 8.0]);
        assert!(table.row(vocab.special().pad).iter().all(|&v| v == 0.0));
        let start = table.row(vocab.special().start);
        assert!(start.iter().all(|v| v.abs() <= RESERVED_INIT_RANGE));
        assert!(start.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicate_token_is_named() {
        let err = read("2 2\nfoo 1 2\nfoo 3 4\n").unwrap_err().to_string();
        assert!(err.contains("\"foo\""), "{err}");
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn dimension_mismatch_cites_line() {
        let err = read("2 3\nfoo 1 2 3\nbar 1 2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header() {
        assert!(matches!(read("abc\nfoo 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read(""), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read("3 1\nfoo 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_tokens_fall_back_to_oov() {
        let vocab = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(vocab.id("zzz"), vocab.special().oov);
        assert_eq!(vocab.id("b"), 1);
        let s = vocab.special();
        let ids = [s.oov, s.pad, s.start, s.end, s.field_boundary];
        for (i, a) in ids.iter().enumerate() {
            assert!(vocab.is_reserved(*a));
            assert!(ids[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn greedy_bigram_merge() {
        let vocab = Vocabulary::from_tokens(["new", "york", "new_york", "city"]).unwrap();
        let toks: Vec<String> = ["new", "york", "city"].iter().map(|s| s.to_string()).collect();
        let plain: Vec<_> = vocab.lookup(&toks).into_iter().map(|(id, _)| id).collect();
        assert_eq!(plain, vec![0, 1, 3]);
        let vocab = vocab.with_bigrams(true);
        let merged = vocab.lookup(&toks);
        assert_eq!(merged.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(merged[0].1, "new_york");
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vec");
        let (vocab, table) = read("2 2\nx 0.125 -1\ny 3 4.5\n").unwrap();
        write_embeddings(&path, &vocab, &table).unwrap();
        let (v2, t2) = load_embeddings_with_seed(&path, 1).unwrap();
        assert_eq!(vocab, v2);
        assert_eq!(table, t2);
    }
}
