use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::trainer::{evaluate, train, Example, TrainingConfig};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, RankingModel};
use crate::text::EmbeddingTable;

/// One line of a trial log or metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub run_id: String,
    pub config: serde_json::Value,
    pub epoch: f64,
    pub split: String,
    pub loss: Option<f64>,
    pub ndcg1: f64,
    pub ndcg3: f64,
    pub ndcg10: f64,
    pub err: f64,
    pub auc: f64,
}

impl ReportRecord {
    pub fn from_metrics(run_id: impl Into<String>, config: serde_json::Value, epoch: f64, split: &str, m: &MetricsReport) -> Self {
        Self {
            run_id: run_id.into(),
            config,
            epoch,
            split: split.to_string(),
            loss: m.loss,
            ndcg1: m.ndcg1,
            ndcg3: m.ndcg3,
            ndcg10: m.ndcg10,
            err: m.err,
            auc: m.auc,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    crate::io::write_atomic(path.as_ref(), &out)
}

/// Inclusive ranges to sample hyperparameters from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub projection_dim: (usize, usize),
    pub doc_hidden: (usize, usize),
    pub query_hidden: (usize, usize),
    pub hidden: (usize, usize),
    pub match_channels: (usize, usize),
    pub filters_first: (usize, usize),
    pub filters_second: (usize, usize),
    /// Sampled on a grid of quarter epochs.
    pub epochs: (f64, f64),
    pub dropout: (f64, f64),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
}

impl SearchSpace {
    /// The space holding exactly the given configuration.
    pub fn singleton(model: &ModelConfig, training: &TrainingConfig) -> Self {
        let p = |v| (v, v);
        Self {
            projection_dim: p(model.projection_dim),
            doc_hidden: p(model.doc_hidden),
            query_hidden: p(model.query_hidden),
            hidden: p(model.hidden),
            match_channels: p(model.match_channels),
            filters_first: p(model.filters_first),
            filters_second: p(model.filters_second),
            epochs: (training.epochs, training.epochs),
            dropout: (training.dropout, training.dropout),
            learning_rate: (training.learning_rate, training.learning_rate),
        }
    }

    fn check(&self) -> Result<()> {
        let ints = [
            ("projection_dim", self.projection_dim),
            ("doc_hidden", self.doc_hidden),
            ("query_hidden", self.query_hidden),
            ("hidden", self.hidden),
            ("match_channels", self.match_channels),
            ("filters_first", self.filters_first),
            ("filters_second", self.filters_second),
        ];
        for (name, (lo, hi)) in ints {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("search range {name} is empty")));
            }
        }
        for (name, (lo, hi)) in [("epochs", self.epochs), ("dropout", self.dropout), ("learning_rate", self.learning_rate)] {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("search range {name} is empty")));
            }
        }
        if self.learning_rate.0 <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, base: &ModelConfig, training: &TrainingConfig, rng: &mut R) -> (ModelConfig, TrainingConfig) {
        let mut int = |(lo, hi): (usize, usize)| rng.gen_range(lo..=hi);
        let model = ModelConfig {
            projection_dim: int(self.projection_dim),
            doc_hidden: int(self.doc_hidden),
            query_hidden: int(self.query_hidden),
            hidden: int(self.hidden),
            match_channels: int(self.match_channels),
            filters_first: int(self.filters_first),
            filters_second: int(self.filters_second),
            ..base.clone()
        };
        let quarters = ((self.epochs.0 * 4.0).ceil() as u64, (self.epochs.1 * 4.0).floor() as u64);
        let epochs = if quarters.0 <= quarters.1 {
            rng.gen_range(quarters.0..=quarters.1) as f64 / 4.0
        } else {
            self.epochs.0
        };
        let dropout = if self.dropout.0 < self.dropout.1 { rng.gen_range(self.dropout.0..=self.dropout.1) } else { self.dropout.0 };
        let (la, lb) = (self.learning_rate.0.ln(), self.learning_rate.1.ln());
        let learning_rate = if la < lb { rng.gen_range(la..=lb).exp() } else { self.learning_rate.0 };
        (model, TrainingConfig { epochs, dropout, learning_rate, ..training.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: TrialConfig,
    pub best_record: ReportRecord,
    pub trials: Vec<ReportRecord>,
}

/// Data a search or sweep trains and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub table: &'a Arc<EmbeddingTable>,
    pub train: &'a [Example],
    pub validation: &'a [Example],
}

/// Seeded random search. Each trial trains for its sampled epochs, capped at
/// `budget_epochs`, and is scored on validation loss; the lowest wins. Trials
/// run in parallel and the log is written to `log_path` when given.
pub fn random_search(
    base: &ModelConfig,
    training: &TrainingConfig,
    space: &SearchSpace,
    n_runs: usize,
    budget_epochs: f64,
    data: ExperimentData<'_>,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<SearchOutcome> {
    space.check()?;
    if n_runs == 0 {
        return Err(Error::InvalidArgument("random search needs at least one run".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::Empty("random search needs a validation set".into()));
    }
    let trials: Vec<(TrialConfig, ReportRecord)> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (model_cfg, mut train_cfg) = space.sample(base, training, &mut rng);
            train_cfg.epochs = train_cfg.epochs.min(budget_epochs);
            train_cfg.seed = rng.gen();
            let model = RankingModel::new(model_cfg.clone(), data.table.clone(), rng.gen())?;
            let outcome = train(model, data.train, data.validation, &train_cfg)?;
            let metrics = evaluate(&outcome.model, data.validation, train_cfg.binary_targets)?;
            let cfg = TrialConfig { model: model_cfg, training: train_cfg };
            let record = ReportRecord::from_metrics(
                format!("trial-{run:04}"),
                serde_json::to_value(&cfg)?,
                outcome.best_epoch,
                "validation",
                &metrics,
            );
            Ok((cfg, record))
        })
        .collect::<Result<_>>()?;
    let best = trials
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let la = a.1 .1.loss.unwrap_or(f64::INFINITY);
            let lb = b.1 .1.loss.unwrap_or(f64::INFINITY);
            la.total_cmp(&lb).then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("at least one trial");
    let records: Vec<ReportRecord> = trials.iter().map(|t| t.1.clone()).collect();
    if let Some(p) = log_path {
        write_jsonl(p, &records)?;
    }
    Ok(SearchOutcome { best: trials[best].0.clone(), best_record: trials[best].1.clone(), trials: records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub queries: usize,
    pub examples: usize,
    pub test_loss: f64,
    pub test_auc: f64,
}

/// Retrains with fixed hyperparameters on query-level subsamples of the
/// training data and reports test loss per fraction.
pub fn training_size_sweep(
    model_config: &ModelConfig,
    training: &TrainingConfig,
    model_seed: u64,
    data: ExperimentData<'_>,
    test: &[Example],
    fractions: &[f64],
) -> Result<Vec<SweepPoint>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let cfg = TrainingConfig { subsample: fraction, ..training.clone() };
            let subset = super::trainer::subsample_by_query(data.train, fraction, cfg.seed)?;
            let queries = subset.iter().map(|e| e.query_text.as_str()).collect::<std::collections::HashSet<_>>().len();
            let model = RankingModel::new(model_config.clone(), data.table.clone(), model_seed)?;
            let outcome = train(model, data.train, data.validation, &cfg)?;
            let m = evaluate(&outcome.model, test, cfg.binary_targets)?;
            Ok(SweepPoint {
                fraction,
                queries,
                examples: subset.len(),
                test_loss: m.loss.unwrap_or(f64::NAN),
                test_auc: m.auc,
            })
        })
        .collect()
}
