//! Sequence encoders: the shared input projection, bi-LSTM and CNN encoders,
//! and the post-encoder state projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Init, LstmWeights, Padding, ParamId, ParamStore, Session, Tensor, Var};
use crate::text::{EmbeddingTable, ProcessedText};

/// Which sequence encoder a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    BiLstm,
    Cnn,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::BiLstm => "bilstm",
            EncoderKind::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(EncoderKind::BiLstm),
            "cnn" => Ok(EncoderKind::Cnn),
            other => Err(Error::InvalidArgument(format!("unknown encoder {other:?} (expected bilstm or cnn)"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Registers named parameters under a common prefix.
pub(crate) struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = init.tensor(shape, self.rng)?;
        self.store.add(name, t, true)
    }

    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.add(name, shape, Init::Glorot { fan_in, fan_out })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, shape, Init::Zeros)
    }
}

/// Linear map from embedding space to the `l`-dimensional model input,
/// shared by query and document.
#[derive(Debug, Clone)]
pub struct InputProjection {
    weight: ParamId,
    bias: Option<ParamId>,
    input: usize,
    output: usize,
}

impl InputProjection {
    pub(crate) fn build<R: Rng>(b: &mut ParamBuilder<R>, input: usize, output: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: b.glorot("input_projection.weight", &[input, output], input, output)?,
            bias: if bias { Some(b.zeros("input_projection.bias", &[output])?) } else { None },
            input,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn apply(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                s.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct LstmDirection {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
    projection: Option<ParamId>,
}

impl LstmDirection {
    fn build<R: Rng>(b: &mut ParamBuilder<R>, name: &str, input: usize, hidden: usize, proj: Option<usize>) -> Result<Self> {
        let r = proj.unwrap_or(hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let bias_id = b.store.add(format!("{name}.bias"), Tensor::new([4 * hidden], bias)?, true)?;
        Ok(Self {
            input: b.glorot(&format!("{name}.input"), &[input, 4 * hidden], input, 4 * hidden)?,
            recurrent: b.glorot(&format!("{name}.recurrent"), &[r, 4 * hidden], r, 4 * hidden)?,
            bias: bias_id,
            projection: match proj {
                Some(p) => Some(b.glorot(&format!("{name}.projection"), &[hidden, p], hidden, p)?),
                None => None,
            },
        })
    }

    fn run(&self, s: &mut Session, x: Var, reverse: bool) -> Result<Var> {
        let w = LstmWeights {
            input: s.param(self.input)?,
            recurrent: s.param(self.recurrent)?,
            bias: s.param(self.bias)?,
            projection: self.projection.map(|p| s.param(p)).transpose()?,
        };
        s.tape.lstm_sequence(x, w, reverse)
    }
}

/// Bidirectional LSTM; each position's output is the forward state followed
/// by the backward state.
#[derive(Debug, Clone)]
pub struct BiLstmEncoder {
    forward: LstmDirection,
    backward: LstmDirection,
    hidden: usize,
    state: usize,
}

impl BiLstmEncoder {
    pub(crate) fn build<R: Rng>(
        b: &mut ParamBuilder<R>,
        name: &str,
        input: usize,
        hidden: usize,
        projection: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmDirection::build(b, &format!("{name}.forward"), input, hidden, projection)?,
            backward: LstmDirection::build(b, &format!("{name}.backward"), input, hidden, projection)?,
            hidden,
            state: projection.unwrap_or(hidden),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `[T, l]` to `[T, 2r]`.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var> {
        let f = self.forward.run(s, x, false)?;
        let b = self.backward.run(s, x, true)?;
        s.tape.concat(&[f, b], 1)
    }

    /// Forward state at the last position of `states` joined with the
    /// backward state at the first.
    pub fn last_states(&self, s: &mut Session, states: Var) -> Result<Var> {
        let t = s.tape.value(states)?.shape()[0];
        let last = s.tape.slice(states, 0, t - 1, 1)?;
        let fwd = s.tape.slice(last, 1, 0, self.state)?;
        let first = s.tape.slice(states, 0, 0, 1)?;
        let bwd = s.tape.slice(first, 1, self.state, self.state)?;
        let joined = s.tape.concat(&[fwd, bwd], 1)?;
        s.tape.reshape(joined, &[2 * self.state])
    }

    pub fn output_dim(&self) -> usize {
        2 * self.state
    }
}

/// Width-1 and width-3 convolutions over the sequence with ReLU.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    narrow: (ParamId, ParamId),
    wide: (ParamId, ParamId),
    input: usize,
    narrow_count: usize,
    wide_count: usize,
}

impl CnnEncoder {
    pub(crate) fn build<R: Rng>(b: &mut ParamBuilder<R>, name: &str, input: usize, output: usize) -> Result<Self> {
        if output < 2 {
            return Err(Error::InvalidArgument("cnn encoder needs at least two filters".into()));
        }
        let narrow_count = output / 2;
        let wide_count = output - narrow_count;
        Ok(Self {
            narrow: (
                b.glorot(&format!("{name}.width1.filters"), &[narrow_count, 1, 1, input], input, narrow_count)?,
                b.zeros(&format!("{name}.width1.bias"), &[narrow_count])?,
            ),
            wide: (
                b.glorot(&format!("{name}.width3.filters"), &[wide_count, 3, 1, input], 3 * input, wide_count)?,
                b.zeros(&format!("{name}.width3.bias"), &[wide_count])?,
            ),
            input,
            narrow_count,
            wide_count,
        })
    }

    fn branch(&self, s: &mut Session, x: Var, ids: (ParamId, ParamId), count: usize) -> Result<Var> {
        let t = s.tape.value(x)?.shape()[0];
        let img = s.tape.reshape(x, &[t, 1, self.input])?;
        let f = s.param(ids.0)?;
        let b = s.param(ids.1)?;
        let y = s.tape.conv2d_full_depth(img, f, b, Padding::Same)?;
        s.tape.reshape(y, &[t, count])
    }

    /// `[T, l]` to `[T, output]`.
    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var> {
        let a = self.branch(s, x, self.narrow, self.narrow_count)?;
        let c = self.branch(s, x, self.wide, self.wide_count)?;
        let y = s.tape.concat(&[a, c], 1)?;
        s.tape.relu(y)
    }

    pub fn output_dim(&self) -> usize {
        self.narrow_count + self.wide_count
    }
}

#[derive(Debug, Clone)]
pub enum SequenceEncoder {
    BiLstm(BiLstmEncoder),
    Cnn(CnnEncoder),
}

impl SequenceEncoder {
    /// `hidden` is the per-direction size; the CNN produces `2 * hidden`
    /// features so both encoders have the same output width.
    pub(crate) fn build<R: Rng>(
        b: &mut ParamBuilder<R>,
        kind: EncoderKind,
        name: &str,
        input: usize,
        hidden: usize,
        projection: Option<usize>,
    ) -> Result<Self> {
        Ok(match kind {
            EncoderKind::BiLstm => SequenceEncoder::BiLstm(BiLstmEncoder::build(b, name, input, hidden, projection)?),
            EncoderKind::Cnn => SequenceEncoder::Cnn(CnnEncoder::build(b, name, input, 2 * hidden)?),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            SequenceEncoder::BiLstm(_) => EncoderKind::BiLstm,
            SequenceEncoder::Cnn(_) => EncoderKind::Cnn,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SequenceEncoder::BiLstm(e) => e.output_dim(),
            SequenceEncoder::Cnn(e) => e.output_dim(),
        }
    }

    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            SequenceEncoder::BiLstm(e) => e.encode(s, x),
            SequenceEncoder::Cnn(e) => e.encode(s, x),
        }
    }

    /// Fixed-length summary: last states for the bi-LSTM, max-pool for the
    /// CNN, which has no direction to take a last state from.
    pub fn summary(&self, s: &mut Session, states: Var) -> Result<Var> {
        match self {
            SequenceEncoder::BiLstm(e) => e.last_states(s, states),
            SequenceEncoder::Cnn(_) => {
                let t = s.tape.value(states)?.shape()[0];
                s.tape.masked_maxpool_over_sequence(states, &vec![true; t])
            }
        }
    }
}

/// Linear map from encoder states to the `k` match channels, no bias.
#[derive(Debug, Clone)]
pub struct StateProjection {
    weight: ParamId,
    output: usize,
}

impl StateProjection {
    pub(crate) fn build<R: Rng>(b: &mut ParamBuilder<R>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self { weight: b.glorot(&format!("{name}.weight"), &[input, output], input, output)?, output })
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn apply(&self, s: &mut Session, states: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        s.tape.matmul(states, w)
    }
}

/// Embeds the unmasked prefix of `text`, projects it and applies input
/// dropout, giving `[true_length, l]`.
pub fn embed_prefix(
    s: &mut Session,
    text: &ProcessedText,
    table: &EmbeddingTable,
    proj: &InputProjection,
    dropout: f64,
) -> Result<Var> {
    text.require_nonempty()?;
    if table.dim() != proj.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {} does not match the input projection ({})",
            table.dim(),
            proj.input_dim()
        )));
    }
    let x = s.constant(table.gather(text.real_ids())?)?;
    let x = proj.apply(s, x)?;
    s.dropout(x, dropout)
}

/// Full encoding of `text` to `[len, k]`: encoder states projected to `k`
/// dimensions, with zero rows at masked positions.
pub fn encode(
    s: &mut Session,
    text: &ProcessedText,
    table: &EmbeddingTable,
    proj: &InputProjection,
    enc: &SequenceEncoder,
    out: &StateProjection,
    dropout: f64,
) -> Result<Var> {
    let x = embed_prefix(s, text, table, proj, dropout)?;
    let states = enc.encode(s, x)?;
    let y = out.apply(s, states)?;
    pad_rows(s, y, text.len())
}

/// Appends zero rows to a `[t, d]` value until it has `len` rows.
pub fn pad_rows(s: &mut Session, v: Var, len: usize) -> Result<Var> {
    let shape = s.tape.value(v)?.shape().to_vec();
    if shape[0] >= len {
        return Ok(v);
    }
    let zeros = s.constant(Tensor::zeros([len - shape[0], shape[1]])?)?;
    s.tape.concat(&[v, zeros], 0)
}
