//! Training, hyperparameter search and graded-relevance evaluation.

mod adam;
mod grade;
mod metrics;
mod search;
mod trainer;

pub use adam::Adam;
pub use grade::RelevanceGrade;
pub use metrics::{err, gain, ndcg_at_k, pr_curve, roc_auc, MetricsReport, QueryMetrics, RankedQuery};
pub use search::{
    random_search, training_size_sweep, write_jsonl, ExperimentData, ReportRecord, SearchOutcome, SearchSpace,
    SweepPoint, TrialConfig,
};
pub use trainer::{
    bce_gradient, bce_loss, evaluate, mean_loss, model_gradient_check, rank_by_query, score_examples,
    subsample_by_query, train, CurvePoint, Example, TrainingConfig, TrainingOutcome, BCE_EPSILON,
};

#[cfg(test)]
mod tests;
