//! Scoring architectures: Match-Tensor, SSM and the two hybrids.

mod config;
mod match_tensor;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Architecture, ModelConfig};
pub use match_tensor::{build_match_tensor, exact_match_indicator, ScoringHead, FILTER_GROUPS};

use crate::encoders::{embed_prefix, InputProjection, ParamBuilder, SequenceEncoder, StateProjection};
use crate::error::{Error, Result};
use crate::tensor::{Init, Mode, ParamId, ParamStore, Session, Tensor, Var};
use crate::text::{EmbeddingTable, ProcessedText};

/// Initial value of the exact-match weight.
pub const ALPHA_INIT: f64 = 1.0;

#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn build<R: Rng>(b: &mut ParamBuilder<R>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: b.glorot(&format!("{name}.weight"), &[input, output], input, output)?,
            bias: b.zeros(&format!("{name}.bias"), &[output])?,
        })
    }

    fn apply(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight)?, s.param(self.bias)?);
        let y = s.tape.matmul(x, w)?;
        s.tape.add(y, b)
    }
}

/// Query-conditioned softmax pooling over document states.
#[derive(Debug, Clone)]
pub struct AttentionPooling {
    query: Dense,
    doc: Dense,
}

impl AttentionPooling {
    fn build<R: Rng>(b: &mut ParamBuilder<R>, query_dim: usize, doc_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            query: Dense::build(b, "attention.query", query_dim, width)?,
            doc: Dense::build(b, "attention.doc", doc_dim, width)?,
        })
    }

    /// Softmax weights over the unmasked rows of `d_states`.
    pub fn weights(&self, s: &mut Session, d_states: Var, q_embedding: Var, mask: &[bool]) -> Result<Var> {
        let u = self.query.apply(s, q_embedding)?;
        let u = s.tape.relu(u)?;
        let v = self.doc.apply(s, d_states)?;
        let v = s.tape.relu(v)?;
        let width = s.tape.value(u)?.len();
        let col = s.tape.reshape(u, &[width, 1])?;
        let logits = s.tape.matmul(v, col)?;
        let n = s.tape.value(logits)?.len();
        let logits = s.tape.reshape(logits, &[n])?;
        s.tape.softmax(logits, Some(mask))
    }

    /// Convex combination of the document states.
    pub fn pool(&self, s: &mut Session, d_states: Var, q_embedding: Var, mask: &[bool]) -> Result<Var> {
        let w = self.weights(s, d_states, q_embedding, mask)?;
        s.tape.matmul(w, d_states)
    }
}

#[derive(Debug, Clone)]
struct MatchBranch {
    projections: Option<(StateProjection, StateProjection)>,
    alpha: ParamId,
    head: ScoringHead,
}

#[derive(Debug, Clone)]
struct SsmBranch {
    query: Dense,
    doc: Dense,
    attention: Option<AttentionPooling>,
}

/// Trainable-parameter totals, grouped by component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: usize,
    pub components: BTreeMap<String, usize>,
}

/// A scoring model `(query, document) -> P(relevant)` with its parameters
/// and the frozen embedding table it reads from.
#[derive(Debug, Clone)]
pub struct RankingModel {
    config: ModelConfig,
    table: Arc<EmbeddingTable>,
    store: ParamStore,
    projection: InputProjection,
    query_encoder: SequenceEncoder,
    doc_encoder: SequenceEncoder,
    match_branch: Option<MatchBranch>,
    ssm_branch: Option<SsmBranch>,
    comparison: Option<(Dense, Dense)>,
}

impl RankingModel {
    pub fn new(config: ModelConfig, table: Arc<EmbeddingTable>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng };
        let c = &config;
        let arch = c.architecture;
        let projection = InputProjection::build(&mut b, table.dim(), c.projection_dim, c.input_bias)?;
        let query_encoder = SequenceEncoder::build(
            &mut b,
            c.encoder,
            "query_encoder",
            c.projection_dim,
            c.query_hidden,
            c.recurrent_projection,
        )?;
        let doc_encoder =
            SequenceEncoder::build(&mut b, c.encoder, "doc_encoder", c.projection_dim, c.doc_hidden, c.recurrent_projection)?;
        let match_branch = if arch.has_match_tensor() {
            let projections = if arch.has_product_channels() {
                Some((
                    StateProjection::build(&mut b, "query_state_projection", query_encoder.output_dim(), c.match_channels)?,
                    StateProjection::build(&mut b, "doc_state_projection", doc_encoder.output_dim(), c.match_channels)?,
                ))
            } else {
                None
            };
            let alpha = b.add("exact_match.alpha", &[1], Init::Constant(ALPHA_INIT))?;
            let channels = if projections.is_some() { c.match_channels + 1 } else { 1 };
            let head = ScoringHead::build(&mut b, channels, c.filters_first, c.filters_second)?;
            Some(MatchBranch { projections, alpha, head })
        } else {
            None
        };
        let ssm_branch = if arch.has_ssm() {
            let (qd, dd) = (query_encoder.output_dim(), doc_encoder.output_dim());
            Some(SsmBranch {
                query: Dense::build(&mut b, "ssm.query_projection", qd, c.hidden)?,
                doc: Dense::build(&mut b, "ssm.doc_projection", dd, c.hidden)?,
                attention: if c.attention_pooling { Some(AttentionPooling::build(&mut b, qd, dd, c.hidden)?) } else { None },
            })
        } else {
            None
        };
        let comparison = if arch == Architecture::Ssm {
            None
        } else {
            let width = c.filters_second + if arch.has_ssm() { c.hidden } else { 0 };
            Some((
                Dense::build(&mut b, "comparison.hidden", width, c.hidden)?,
                Dense::build(&mut b, "comparison.output", c.hidden, 1)?,
            ))
        };
        Ok(Self { config, table, store, projection, query_encoder, doc_encoder, match_branch, ssm_branch, comparison })
    }

    /// Rebuilds a model around saved parameters. Every stored tensor must
    /// match a parameter of the configured model by name and shape.
    pub fn from_parameters(
        config: ModelConfig,
        table: Arc<EmbeddingTable>,
        params: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, table, 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, tensor) in params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Manifest(format!("unexpected parameter {name:?}")))?;
            let p = model.store.get_mut(id);
            if p.tensor.shape() != tensor.shape() {
                return Err(Error::Manifest(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = tensor;
            seen[id.index()] = true;
        }
        if let Some((_, p)) = model.store.iter().find(|(id, _)| !seen[id.index()]) {
            return Err(Error::Manifest(format!("missing parameter {:?}", p.name)));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Dropout rate on encoder inputs, active in [`Mode::Train`] only.
    pub fn set_dropout(&mut self, rate: f64) {
        self.config.dropout = rate;
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn alpha(&self) -> Option<f64> {
        self.match_branch.as_ref().map(|m| self.store.get(m.alpha).tensor.values()[0])
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let mut components = BTreeMap::new();
        let mut total = 0;
        for (_, p) in self.store.iter().filter(|(_, p)| p.trainable) {
            let component = p.name.split('.').next().unwrap_or(&p.name).to_string();
            *components.entry(component).or_insert(0) += p.tensor.len();
            total += p.tensor.len();
        }
        ParameterCount { total, components }
    }

    /// Records the forward pass on `s`, returning the probability `[1]`.
    pub fn forward(&self, s: &mut Session, q: &ProcessedText, d: &ProcessedText) -> Result<Var> {
        let dropout = self.config.dropout;
        let qx = embed_prefix(s, q, &self.table, &self.projection, dropout)?;
        let dx = embed_prefix(s, d, &self.table, &self.projection, dropout)?;
        let q_states = self.query_encoder.encode(s, qx)?;
        let d_states = self.doc_encoder.encode(s, dx)?;
        let mut features = Vec::with_capacity(2);
        if let Some(mb) = &self.match_branch {
            let states = match &mb.projections {
                Some((qp, dp)) => Some((qp.apply(s, q_states)?, dp.apply(s, d_states)?)),
                None => None,
            };
            let alpha = s.param(mb.alpha)?;
            let mt = build_match_tensor(s, states, q, d, alpha)?;
            features.push(mb.head.pooled(s, mt)?);
        }
        if let Some(sb) = &self.ssm_branch {
            let hidden = self.ssm_hidden(s, sb, q_states, d_states)?;
            if self.comparison.is_none() {
                let logit = s.tape.sum(hidden)?;
                return s.tape.sigmoid(logit);
            }
            features.push(hidden);
        }
        let (hidden, output) = self.comparison.as_ref().expect("comparison layers exist for match-tensor models");
        let x = if features.len() == 1 { features[0] } else { s.tape.concat(&features, 0)? };
        let h = hidden.apply(s, x)?;
        let h = s.tape.relu(h)?;
        let logit = output.apply(s, h)?;
        s.tape.sigmoid(logit)
    }

    fn ssm_hidden(&self, s: &mut Session, sb: &SsmBranch, q_states: Var, d_states: Var) -> Result<Var> {
        let q_emb = self.query_encoder.summary(s, q_states)?;
        let n = s.tape.value(d_states)?.shape()[0];
        let mask = vec![true; n];
        let d_emb = match &sb.attention {
            Some(att) => att.pool(s, d_states, q_emb, &mask)?,
            None => s.tape.masked_maxpool_over_sequence(d_states, &mask)?,
        };
        let u = sb.query.apply(s, q_emb)?;
        let v = sb.doc.apply(s, d_emb)?;
        s.tape.mul(u, v)
    }

    /// Inference-mode probability of relevance.
    pub fn score(&self, q: &ProcessedText, d: &ProcessedText) -> Result<f64> {
        let mut s = Session::new(&self.store, Mode::Infer, 0);
        let p = self.forward(&mut s, q, d)?;
        Ok(s.tape.value(p)?.values()[0])
    }

    /// Binary cross-entropy against `target` and its gradient, laid out like
    /// [`ParamStore::flatten_trainable`].
    pub fn loss_and_gradient(
        &self,
        q: &ProcessedText,
        d: &ProcessedText,
        target: f64,
        mode: Mode,
        seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut s = Session::new(&self.store, mode, seed);
        let p = self.forward(&mut s, q, d)?;
        let loss = s.tape.binary_cross_entropy(p, target)?;
        s.tape.backward(loss)?;
        Ok((s.tape.value(loss)?.values()[0], s.flat_grad()))
    }

    /// Loss without gradients, plus the activation signature of the pass.
    pub fn loss_with_signature(&self, q: &ProcessedText, d: &ProcessedText, target: f64) -> Result<(f64, u64)> {
        let mut s = Session::new(&self.store, Mode::Infer, 0);
        let p = self.forward(&mut s, q, d)?;
        let loss = s.tape.binary_cross_entropy(p, target)?;
        Ok((s.tape.value(loss)?.values()[0], s.tape.activation_signature()))
    }

    /// The padded `[m, n, C]` match tensor for inspection.
    pub fn match_tensor(&self, q: &ProcessedText, d: &ProcessedText) -> Result<Tensor> {
        let mb = self
            .match_branch
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no match tensor", self.architecture())))?;
        let mut s = Session::new(&self.store, Mode::Infer, 0);
        let states = match &mb.projections {
            Some((qp, dp)) => Some((
                crate::encoders::encode(&mut s, q, &self.table, &self.projection, &self.query_encoder, qp, 0.0)?,
                crate::encoders::encode(&mut s, d, &self.table, &self.projection, &self.doc_encoder, dp, 0.0)?,
            )),
            None => None,
        };
        let alpha = s.param(mb.alpha)?;
        let mt = match states {
            Some(_) => build_match_tensor(&mut s, states, q, d, alpha)?,
            None => {
                let ind = exact_match_indicator(q, d, q.len(), d.len())?;
                let ind = s.constant(Tensor::new([q.len(), d.len(), 1], ind.into_values())?)?;
                s.tape.scalar_scale(ind, alpha)?
            }
        };
        Ok(s.tape.value(mt)?.clone())
    }
}

#[cfg(test)]
mod tests;
