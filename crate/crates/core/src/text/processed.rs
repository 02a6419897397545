use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};

pub const QUERY_CAP: usize = 8;
pub const DOCUMENT_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextKind {
    Query,
    Document,
}

impl TextKind {
    pub fn cap(self) -> usize {
        match self {
            TextKind::Query => QUERY_CAP,
            TextKind::Document => DOCUMENT_CAP,
        }
    }
}

/// Identity used by the exact-match channel. Reserved tokens have none; OOV
/// tokens match only when their surface strings agree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MatchKey<'a> {
    Id(TokenId),
    Oov(&'a str),
}

/// A query or document as a masked id sequence.
///
/// Real tokens (including start, end and field-boundary markers) come first
/// and are followed only by PAD positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedText {
    ids: Vec<TokenId>,
    surface: Vec<String>,
    mask: Vec<bool>,
    true_length: usize,
    kind: TextKind,
    pad: TokenId,
    oov: TokenId,
    first_reserved: TokenId,
}

impl ProcessedText {
    fn build(pairs: Vec<(TokenId, String)>, kind: TextKind, vocab: &Vocabulary) -> Self {
        let mut pairs = pairs;
        pairs.truncate(kind.cap());
        let true_length = pairs.len();
        let (ids, surface) = pairs.into_iter().unzip();
        let special = vocab.special();
        Self {
            ids,
            surface,
            mask: vec![true; true_length],
            true_length,
            kind,
            pad: special.pad,
            oov: special.oov,
            first_reserved: special.oov,
        }
    }

    /// Tokenises and truncates a query to [`QUERY_CAP`] tokens.
    pub fn query(text: &str, vocab: &Vocabulary) -> Self {
        Self::build(vocab.lookup(&tokenize(text)), TextKind::Query, vocab)
    }

    /// Query from already tokenised text.
    pub fn query_from_tokens(tokens: &[String], vocab: &Vocabulary) -> Self {
        Self::build(vocab.lookup(tokens), TextKind::Query, vocab)
    }

    /// Builds `START f1 BOUNDARY f2 ... END`, truncated to
    /// [`DOCUMENT_CAP`]. Fields that tokenise to nothing are skipped.
    pub fn document<'f, I>(fields: I, vocab: &Vocabulary) -> Self
    where
        I: IntoIterator<Item = &'f str>,
    {
        let special = vocab.special();
        let mut pairs = vec![(special.start, "<start>".to_string())];
        let mut first = true;
        for field in fields {
            let toks = tokenize(field);
            if toks.is_empty() {
                continue;
            }
            if !first {
                pairs.push((special.field_boundary, "<field>".to_string()));
            }
            first = false;
            pairs.extend(vocab.lookup(&toks));
            if pairs.len() > DOCUMENT_CAP {
                break;
            }
        }
        pairs.push((special.end, "<end>".to_string()));
        Self::build(pairs, TextKind::Document, vocab)
    }

    /// Extends the sequence with PAD positions up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(self.pad);
            self.surface.push(String::new());
            self.mask.push(false);
        }
        self
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn kind(&self) -> TextKind {
        self.kind
    }

    /// Ids of the unmasked prefix.
    pub fn real_ids(&self) -> &[TokenId] {
        &self.ids[..self.true_length]
    }

    pub fn surface(&self, i: usize) -> &str {
        &self.surface[i]
    }

    pub fn match_key(&self, i: usize) -> Option<MatchKey<'_>> {
        if !self.mask[i] {
            return None;
        }
        let id = self.ids[i];
        if id == self.oov {
            Some(MatchKey::Oov(&self.surface[i]))
        } else if id >= self.first_reserved {
            None
        } else {
            Some(MatchKey::Id(id))
        }
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.true_length == 0 {
            return Err(Error::Empty(format!("{:?} has no unmasked positions", self.kind)));
        }
        Ok(())
    }
}
