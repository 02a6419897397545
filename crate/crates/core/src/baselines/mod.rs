//! Classical baselines: BM25 and boosted-tree score combiners.

mod bm25;
mod boost;

pub use bm25::{bm25_score, Bm25Params, CorpusStats};
pub use boost::{
    ensemble_log_loss, ensemble_score, train_boosted_ensemble, BoostConfig, BoostedEnsemble, RegressionTree, TreeNode,
};
