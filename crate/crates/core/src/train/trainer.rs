use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::grade::RelevanceGrade;
use super::metrics::{MetricsReport, RankedQuery};
use crate::error::{Error, Result};
use crate::models::RankingModel;
use crate::tensor::gradcheck::compare_with_central_differences;
use crate::tensor::{GradCheckReport, Mode};
use crate::text::ProcessedText;

/// Probability clamp used by the loss.
pub const BCE_EPSILON: f64 = 1e-12;

/// One judged (query, document) pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Raw query string; groups examples into rankings.
    pub query_text: String,
    pub query: ProcessedText,
    pub document: ProcessedText,
    pub grade: RelevanceGrade,
}

/// Binary cross-entropy `-(t ln p + (1 - t) ln(1 - p))` with `p` clamped to
/// `[eps, 1 - eps]`.
pub fn bce_loss(p: f64, target: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("prediction {p} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target {target} outside [0, 1]")));
    }
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    Ok(-(target * p.ln() + (1.0 - target) * (1.0 - p).ln()))
}

/// `dL/dp` of [`bce_loss`].
pub fn bce_gradient(p: f64, target: f64) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    -target / p + (1.0 - target) / (1.0 - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// May be fractional.
    pub epochs: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Fraction of training queries kept (all of their results are kept).
    pub subsample: f64,
    /// Use `{0, 1, 1}` targets instead of `{0, 0.5, 1}`.
    pub binary_targets: bool,
    /// Validation cadence in epochs.
    pub eval_every: f64,
    /// Return the parameters with the lowest validation loss rather than the
    /// final ones.
    pub keep_best: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 200,
            epochs: 1.0,
            dropout: 0.2,
            seed: 0,
            subsample: 1.0,
            binary_targets: false,
            eval_every: 0.25,
            keep_best: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidArgument(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        if !(self.epochs >= 0.0 && self.epochs.is_finite()) {
            return Err(Error::InvalidArgument(format!("epochs {} must be non-negative", self.epochs)));
        }
        if !(self.eval_every > 0.0) {
            return Err(Error::InvalidArgument("eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: f64,
    /// Mean training loss since the previous point.
    pub train_loss: Option<f64>,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: RankingModel,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: f64,
    pub best_validation_loss: Option<f64>,
}

/// Keeps the examples of a seeded random `fraction` of the distinct queries,
/// in their original order.
pub fn subsample_by_query(examples: &[Example], fraction: f64, seed: u64) -> Result<Vec<Example>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut queries: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for e in examples {
        if seen.insert(e.query_text.as_str()) {
            queries.push(&e.query_text);
        }
    }
    if fraction == 1.0 {
        return Ok(examples.to_vec());
    }
    let keep = (fraction * queries.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Empty(format!("fraction {fraction} keeps no queries")));
    }
    queries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chosen: HashSet<&str> = queries[..keep].iter().copied().collect();
    Ok(examples.iter().filter(|e| chosen.contains(e.query_text.as_str())).cloned().collect())
}

/// Inference scores in example order.
pub fn score_examples(model: &RankingModel, examples: &[Example]) -> Result<Vec<f64>> {
    examples.par_iter().map(|e| model.score(&e.query, &e.document)).collect()
}

pub fn mean_loss(model: &RankingModel, examples: &[Example], binary_targets: bool) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to compute a loss over".into()));
    }
    let scores = score_examples(model, examples)?;
    let mut total = 0.0;
    for (p, e) in scores.iter().zip(examples) {
        total += bce_loss(*p, e.grade.target(binary_targets))?;
    }
    Ok(total / examples.len() as f64)
}

/// Groups scored examples by query in order of first appearance.
pub fn rank_by_query(examples: &[Example], scores: &[f64]) -> Vec<RankedQuery> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<RankedQuery> = Vec::new();
    for (e, &s) in examples.iter().zip(scores) {
        let i = *index.entry(&e.query_text).or_insert_with(|| {
            out.push(RankedQuery { query: e.query_text.clone(), results: Vec::new() });
            out.len() - 1
        });
        out[i].results.push((s, e.grade));
    }
    out
}

pub fn evaluate(model: &RankingModel, examples: &[Example], binary_targets: bool) -> Result<MetricsReport> {
    let scores = score_examples(model, examples)?;
    let mut total = 0.0;
    for (p, e) in scores.iter().zip(examples) {
        total += bce_loss(*p, e.grade.target(binary_targets))?;
    }
    let loss = total / examples.len().max(1) as f64;
    MetricsReport::from_rankings(&rank_by_query(examples, &scores), Some(loss))
}

fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains `model` with Adam over shuffled mini-batches.
///
/// Per-example gradients within a batch are computed in parallel and summed
/// in example order, so results do not depend on the thread count.
pub fn train(
    mut model: RankingModel,
    train_set: &[Example],
    validation: &[Example],
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let data = subsample_by_query(train_set, config.subsample, config.seed)?;
    let n = data.len();
    let binary = config.binary_targets;
    let validate = |m: &RankingModel| -> Result<Option<f64>> {
        if validation.is_empty() {
            Ok(None)
        } else {
            mean_loss(m, validation, binary).map(Some)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    model.set_dropout(config.dropout);
    let width = model.store().trainable_scalars();
    let mut adam = Adam::new(config.learning_rate, width);
    let total = (config.epochs * n as f64).round() as usize;
    let cadence = ((config.eval_every * n as f64).round() as usize).max(1);
    let mut curve = vec![CurvePoint { epoch: 0.0, train_loss: None, validation_loss: validate(&model)? }];
    let mut best = (0.0, curve[0].validation_loss, model.store().flatten_trainable());
    let mut processed = 0;
    let mut next_eval = cadence;
    let mut since = (0.0, 0usize);
    let mut step = 0u64;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while processed < total {
        if cursor == order.len() {
            order = (0..n).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = config.batch_size.min(order.len() - cursor).min(total - processed);
        let batch = &order[cursor..cursor + take];
        cursor += take;
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let e = &data[i];
                model.loss_and_gradient(
                    &e.query,
                    &e.document,
                    e.grade.target(binary),
                    Mode::Train,
                    example_seed(config.seed, step, k),
                )
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; width];
        for (loss, g) in &results {
            since.0 += loss;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let scale = 1.0 / take as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let mut params = model.store().flatten_trainable();
        adam.update(&mut params, &grad);
        model.store_mut().assign_trainable(&params)?;
        since.1 += take;
        processed += take;
        step += 1;
        if processed >= next_eval || processed == total {
            while next_eval <= processed {
                next_eval += cadence;
            }
            let epoch = processed as f64 / n as f64;
            let validation_loss = validate(&model)?;
            log::info!("epoch {epoch:.2}: train {:.5} validation {validation_loss:?}", since.0 / since.1 as f64);
            curve.push(CurvePoint { epoch, train_loss: Some(since.0 / since.1 as f64), validation_loss });
            if let (Some(v), Some(b)) = (validation_loss, best.1) {
                if v < b {
                    best = (epoch, Some(v), model.store().flatten_trainable());
                }
            }
            since = (0.0, 0);
        }
    }
    let last = curve.last().expect("curve has its initial point");
    if config.keep_best && best.1.is_some() {
        model.store_mut().assign_trainable(&best.2)?;
        Ok(TrainingOutcome { model, curve, best_epoch: best.0, best_validation_loss: best.1 })
    } else {
        let (epoch, loss) = (last.epoch, last.validation_loss);
        Ok(TrainingOutcome { model, curve, best_epoch: epoch, best_validation_loss: loss })
    }
}

/// Compares the model's analytic loss gradient against central differences
/// for every trainable scalar. Dropout is disabled.
pub fn model_gradient_check(
    model: &RankingModel,
    q: &ProcessedText,
    d: &ProcessedText,
    target: f64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_gradient(q, d, target, Mode::Infer, 0)?;
    let (_, center) = model.loss_with_signature(q, d, target)?;
    let point = model.store().flatten_trainable();
    let mut probe = model.clone();
    Ok(compare_with_central_differences(&analytic, &point, step, tolerance, center, |x| {
        probe.store_mut().assign_trainable(x)?;
        probe.loss_with_signature(q, d, target)
    }))
}
