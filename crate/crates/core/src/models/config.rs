use serde::{Deserialize, Serialize};

use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

/// Scoring architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MatchTensor,
    Ssm,
    /// Single exact-match channel Match-Tensor combined with an SSM branch.
    MtExactSsm,
    MtSsm,
}

impl Architecture {
    pub const ALL: [Architecture; 4] =
        [Architecture::MatchTensor, Architecture::Ssm, Architecture::MtExactSsm, Architecture::MtSsm];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MatchTensor => "match_tensor",
            Architecture::Ssm => "ssm",
            Architecture::MtExactSsm => "mt_exact_ssm",
            Architecture::MtSsm => "mt_ssm",
        }
    }

    pub fn has_match_tensor(self) -> bool {
        self != Architecture::Ssm
    }

    pub fn has_ssm(self) -> bool {
        self != Architecture::MatchTensor
    }

    /// Whether the match tensor carries the `k` product channels.
    pub fn has_product_channels(self) -> bool {
        matches!(self, Architecture::MatchTensor | Architecture::MtSsm)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown architecture {s:?} (expected match_tensor, ssm, mt_exact_ssm or mt_ssm)"
            ))
        })
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model hyperparameters. Encoder sizes are per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    /// Width `l` of the shared input projection.
    pub projection_dim: usize,
    pub doc_hidden: usize,
    pub query_hidden: usize,
    /// Number `k` of product channels in the match tensor.
    pub match_channels: usize,
    /// First-layer filters per group (3x3, 3x4 and 3x5).
    pub filters_first: usize,
    pub filters_second: usize,
    /// Comparison-net hidden layer; also the SSM projection width.
    pub hidden: usize,
    pub dropout: f64,
    #[serde(default)]
    pub recurrent_projection: Option<usize>,
    #[serde(default)]
    pub attention_pooling: bool,
    #[serde(default)]
    pub input_bias: bool,
}

impl ModelConfig {
    /// Selected settings for each architecture at full scale. The exact-only
    /// hybrid reuses the full hybrid's settings.
    pub fn tuned(architecture: Architecture) -> Self {
        let (l, hd, hq, hidden, k, f1, f2) = match architecture {
            Architecture::Ssm => (50, 120, 32, 50, 0, 0, 0),
            Architecture::MatchTensor => (40, 70, 15, 50, 40, 18, 20),
            Architecture::MtSsm | Architecture::MtExactSsm => (50, 95, 15, 55, 35, 18, 30),
        };
        Self {
            architecture,
            encoder: EncoderKind::BiLstm,
            projection_dim: l,
            doc_hidden: hd,
            query_hidden: hq,
            match_channels: k,
            filters_first: f1,
            filters_second: f2,
            hidden,
            dropout: 0.2,
            recurrent_projection: None,
            attention_pooling: false,
            input_bias: false,
        }
    }

    /// Small settings suited to synthetic corpora on a single core.
    pub fn small(architecture: Architecture, encoder: EncoderKind) -> Self {
        Self {
            architecture,
            encoder,
            projection_dim: 16,
            doc_hidden: 16,
            query_hidden: 8,
            match_channels: 8,
            filters_first: 6,
            filters_second: 8,
            hidden: 16,
            dropout: 0.0,
            recurrent_projection: None,
            attention_pooling: false,
            input_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("projection_dim", self.projection_dim),
            ("doc_hidden", self.doc_hidden),
            ("query_hidden", self.query_hidden),
            ("hidden", self.hidden),
        ];
        let mut required: Vec<(&str, usize)> = positive.to_vec();
        if self.architecture.has_match_tensor() {
            required.push(("filters_first", self.filters_first));
            required.push(("filters_second", self.filters_second));
        }
        if self.architecture.has_product_channels() {
            required.push(("match_channels", self.match_channels));
        }
        if let Some((name, _)) = required.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.recurrent_projection == Some(0) {
            return Err(Error::InvalidArgument("recurrent_projection must be positive".into()));
        }
        Ok(())
    }
}
