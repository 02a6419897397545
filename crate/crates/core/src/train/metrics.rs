use serde::{Deserialize, Serialize};

use super::grade::RelevanceGrade;
use crate::error::{Error, Result};

/// Gain `2^g - 1` of a grade value.
pub fn gain(grade: u8) -> f64 {
    f64::from((1u32 << grade) - 1)
}

fn dcg(grades: &[u8], k: usize) -> f64 {
    grades.iter().take(k).enumerate().map(|(r, &g)| gain(g) / ((r + 2) as f64).log2()).sum()
}

/// NDCG@k of grades listed in ranked order. `None` when no grade is
/// positive, since such queries have no ideal ranking to normalise by.
pub fn ndcg_at_k(ranked: &[u8], k: usize) -> Option<f64> {
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k.max(1));
    if idcg == 0.0 {
        return None;
    }
    Some(dcg(ranked, k.max(1)) / idcg)
}

/// Expected reciprocal rank with stop probability `(2^g - 1) / 2^g_max`.
pub fn err(ranked: &[u8]) -> f64 {
    let scale = f64::from(1u32 << RelevanceGrade::MAX.value());
    let mut not_stopped = 1.0;
    let mut total = 0.0;
    for (r, &g) in ranked.iter().enumerate() {
        let stop = gain(g) / scale;
        total += not_stopped * stop / (r + 1) as f64;
        not_stopped *= 1.0 - stop;
    }
    total
}

/// ROC AUC by the rank-sum statistic, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("roc auc needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `(recall, precision)` after each distinct score threshold, highest first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let mut tp = 0;
    for (seen, w) in order.iter().enumerate() {
        if labels[*w] {
            tp += 1;
        }
        let last_of_tie = order.get(seen + 1).is_none_or(|&n| scores[n] != scores[*w]);
        if last_of_tie {
            points.push((tp as f64 / total_pos as f64, tp as f64 / (seen + 1) as f64));
        }
    }
    points
}

/// Metrics of one query's ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub ndcg1: Option<f64>,
    pub ndcg3: Option<f64>,
    pub ndcg10: Option<f64>,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg1: f64,
    pub ndcg3: f64,
    pub ndcg10: f64,
    pub err: f64,
    pub auc: f64,
    pub loss: Option<f64>,
    /// Queries left out of the NDCG means because every grade was zero.
    pub excluded_queries: usize,
    pub per_query: Vec<QueryMetrics>,
    pub pr_curve: Vec<(f64, f64)>,
}

/// Scored results of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub query: String,
    pub results: Vec<(f64, RelevanceGrade)>,
}

impl MetricsReport {
    /// Ranks each query's results by descending score (stable for ties) and
    /// aggregates. AUC is global over all results; ERR averages over all
    /// queries; NDCG over queries with a positive grade.
    pub fn from_rankings(queries: &[RankedQuery], loss: Option<f64>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Empty("no queries to evaluate".into()));
        }
        let mut per_query = Vec::with_capacity(queries.len());
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for q in queries {
            let mut results = q.results.clone();
            results.sort_by(|a, b| b.0.total_cmp(&a.0));
            let grades: Vec<u8> = results.iter().map(|r| r.1.value()).collect();
            per_query.push(QueryMetrics {
                query: q.query.clone(),
                ndcg1: ndcg_at_k(&grades, 1),
                ndcg3: ndcg_at_k(&grades, 3),
                ndcg10: ndcg_at_k(&grades, 10),
                err: err(&grades),
            });
            for (s, g) in &q.results {
                scores.push(*s);
                labels.push(g.is_positive());
            }
        }
        let scored: Vec<&QueryMetrics> = per_query.iter().filter(|m| m.ndcg1.is_some()).collect();
        let mean = |f: fn(&QueryMetrics) -> Option<f64>| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().filter_map(|m| f(m)).sum::<f64>() / scored.len() as f64
            }
        };
        Ok(Self {
            ndcg1: mean(|m| m.ndcg1),
            ndcg3: mean(|m| m.ndcg3),
            ndcg10: mean(|m| m.ndcg10),
            err: per_query.iter().map(|m| m.err).sum::<f64>() / per_query.len() as f64,
            auc: roc_auc(&scores, &labels)?,
            loss,
            excluded_queries: per_query.len() - scored.len(),
            pr_curve: pr_curve(&scores, &labels),
            per_query,
        })
    }
}
