use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::TripletRecord;
use crate::baselines::{bm25_score, train_boosted_ensemble, BoostConfig, BoostedEnsemble, Bm25Params, CorpusStats};
use crate::error::{Error, Result};
use crate::text::{tokenize, ProcessedText, Vocabulary};
use crate::train::{Example, MetricsReport, RankedQuery};

/// Tokenizes and truncates records for the neural models.
pub fn prepare_examples(records: &[TripletRecord], vocab: &Vocabulary) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            query_text: r.query.clone(),
            query: ProcessedText::query(&r.query, vocab),
            document: ProcessedText::document(r.document.fields(), vocab),
            grade: r.grade,
        })
        .collect()
}

/// BM25 scores with corpus statistics taken over the scored records.
pub fn bm25_scores(records: &[TripletRecord], params: Bm25Params) -> Result<Vec<f64>> {
    let docs: Vec<Vec<String>> =
        records.iter().map(|r| r.document.fields().iter().flat_map(|f| tokenize(f)).collect()).collect();
    let stats = CorpusStats::from_documents(docs.iter().map(Vec::as_slice))?;
    Ok(records.iter().zip(&docs).map(|(r, d)| bm25_score(&tokenize(&r.query), d, &stats, params)).collect())
}

/// Groups scores by query in order of first appearance and aggregates.
pub fn metrics_from_scores(records: &[TripletRecord], scores: &[f64], loss: Option<f64>) -> Result<MetricsReport> {
    if records.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} records but {} scores", records.len(), scores.len())));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut queries: Vec<RankedQuery> = Vec::new();
    for (r, &s) in records.iter().zip(scores) {
        let i = *index.entry(&r.query).or_insert_with(|| {
            queries.push(RankedQuery { query: r.query.clone(), results: Vec::new() });
            queries.len() - 1
        });
        queries[i].results.push((s, r.grade));
    }
    MetricsReport::from_rankings(&queries, loss)
}

/// Aggregate metrics without the per-query breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub ndcg1: f64,
    pub ndcg3: f64,
    pub ndcg10: f64,
    pub err: f64,
    pub auc: f64,
    pub loss: Option<f64>,
}

impl MetricsSnapshot {
    pub const NAMES: [&'static str; 5] = ["NDCG@1", "NDCG@3", "NDCG@10", "ERR", "AUC"];

    pub fn values(&self) -> [f64; 5] {
        [self.ndcg1, self.ndcg3, self.ndcg10, self.err, self.auc]
    }
}

impl From<&MetricsReport> for MetricsSnapshot {
    fn from(m: &MetricsReport) -> Self {
        Self { ndcg1: m.ndcg1, ndcg3: m.ndcg3, ndcg10: m.ndcg10, err: m.err, auc: m.auc, loss: m.loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub baseline: f64,
    pub candidate: f64,
    /// `100 (candidate - baseline) / baseline`; `None` for a zero baseline.
    pub percent: Option<f64>,
}

/// Percent change of each metric relative to the baseline.
pub fn relative_deltas(baseline: &MetricsSnapshot, candidate: &MetricsSnapshot) -> Vec<MetricDelta> {
    MetricsSnapshot::NAMES
        .iter()
        .zip(baseline.values().into_iter().zip(candidate.values()))
        .map(|(name, (b, c))| MetricDelta {
            metric: name.to_string(),
            baseline: b,
            candidate: c,
            percent: (b != 0.0).then(|| 100.0 * (c - b) / b),
        })
        .collect()
}

/// Renders deltas as an aligned text table.
pub fn format_delta_table(baseline_name: &str, candidate_name: &str, deltas: &[MetricDelta]) -> String {
    let mut out = format!("{:<8} {:>12} {:>12} {:>10}\n", "metric", baseline_name, candidate_name, "delta %");
    for d in deltas {
        let pct = d.percent.map_or_else(|| "n/a".to_string(), |p| format!("{p:+.2}"));
        out.push_str(&format!("{:<8} {:>12.4} {:>12.4} {:>10}\n", d.metric, d.baseline, d.candidate, pct));
    }
    out
}

/// Feature rows with column names and a binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<bool>,
}

/// Writes a tab-separated file whose header names the features followed by
/// a `target` column holding 0 or 1.
pub fn write_features(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}\ttarget", table.names.join("\t"))?;
    for (row, &t) in table.rows.iter().zip(&table.targets) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}\t{}", cells.join("\t"), u8::from(t))?;
    }
    crate::io::write_atomic(path.as_ref(), &out)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::parse(&source, 1, "missing header"))??;
    let mut names: Vec<String> = header.split('\t').map(str::to_string).collect();
    if names.pop().as_deref() != Some("target") || names.is_empty() {
        return Err(Error::parse(&source, 1, "header must list features followed by a target column"));
    }
    let mut table = FeatureTable { names, rows: Vec::new(), targets: Vec::new() };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != table.names.len() + 1 {
            return Err(Error::parse(&source, line_no, format!("expected {} columns", table.names.len() + 1)));
        }
        let row = cells[..cells.len() - 1]
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::parse(&source, line_no, format!("{c:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let target = match cells[cells.len() - 1].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::parse(&source, line_no, format!("target must be 0 or 1, got {other:?}"))),
        };
        table.rows.push(row);
        table.targets.push(target);
    }
    Ok(table)
}

/// Feature names of the model-plus-BM25 ensemble.
pub const ENSEMBLE_FEATURES: [&str; 2] = ["model_score", "bm25"];

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub ensemble: BoostedEnsemble,
    pub validation: FeatureTable,
    pub test: FeatureTable,
    /// Ensemble scores on the test records.
    pub test_scores: Vec<f64>,
}

fn feature_table(records: &[TripletRecord], model_scores: &[f64]) -> Result<FeatureTable> {
    if records.len() != model_scores.len() {
        return Err(Error::InvalidArgument(format!("{} records but {} scores", records.len(), model_scores.len())));
    }
    let bm25 = bm25_scores(records, Bm25Params::default())?;
    Ok(FeatureTable {
        names: ENSEMBLE_FEATURES.iter().map(|s| s.to_string()).collect(),
        rows: model_scores.iter().zip(&bm25).map(|(&m, &b)| vec![m, b]).collect(),
        targets: records.iter().map(|r| r.grade.is_positive()).collect(),
    })
}

/// Fits boosted trees over (model score, BM25) on the validation records
/// and scores the test records with them.
pub fn model_bm25_ensemble(
    validation: &[TripletRecord],
    validation_scores: &[f64],
    test: &[TripletRecord],
    test_scores: &[f64],
    config: &BoostConfig,
) -> Result<EnsembleRun> {
    let validation = feature_table(validation, validation_scores)?;
    let test = feature_table(test, test_scores)?;
    let ensemble = train_boosted_ensemble(&validation.rows, &validation.targets, &ENSEMBLE_FEATURES, config)?;
    let test_scores = test.rows.iter().map(|x| ensemble.score(x)).collect::<Result<Vec<f64>>>()?;
    Ok(EnsembleRun { ensemble, validation, test, test_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dataset::Document;
    use crate::train::RelevanceGrade;

    fn rec(q: &str, body: &str, grade: RelevanceGrade) -> TripletRecord {
        TripletRecord { query: q.into(), document: Document { body: body.into(), ..Default::default() }, grade }
    }

    #[test]
    fn bm25_is_zero_without_overlap() {
        let r = [rec("a", "a b", RelevanceGrade::Vital), rec("a", "c d", RelevanceGrade::NonRelevant)];
        let s = bm25_scores(&r, Bm25Params::default()).unwrap();
        assert!(s[0] > 0.0);
        assert_eq!(s[1], 0.0);
        let m = metrics_from_scores(&r, &s, None).unwrap();
        assert_eq!(m.auc, 1.0);
        assert!(metrics_from_scores(&r, &s[..1], None).is_err());
    }

    #[test]
    fn deltas_are_relative_to_baseline() {
        let b = MetricsSnapshot { ndcg1: 0.5, ndcg3: 0.4, ndcg10: 0.0, err: 0.2, auc: 0.5, loss: None };
        let c = MetricsSnapshot { ndcg1: 0.55, ndcg3: 0.4, ndcg10: 0.1, err: 0.1, auc: 0.75, loss: None };
        let d = relative_deltas(&b, &c);
        assert!((d[0].percent.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(d[1].percent, Some(0.0));
        assert_eq!(d[2].percent, None);
        assert!((d[3].percent.unwrap() + 50.0).abs() < 1e-9);
        assert!((d[4].percent.unwrap() - 50.0).abs() < 1e-9);
        let table = format_delta_table("bm25", "mt", &d);
        assert!(table.contains("AUC") && table.contains("+50.00") && table.contains("n/a"));
    }

    #[test]
    fn ensemble_over_a_separating_model_score() {
        let records: Vec<TripletRecord> = (0..40)
            .map(|i| {
                let grade = if i % 3 == 0 { RelevanceGrade::Relevant } else { RelevanceGrade::NonRelevant };
                rec(&format!("q{}", i / 8), &format!("w{i} x"), grade)
            })
            .collect();
        let scores: Vec<f64> = records.iter().map(|r| if r.grade.is_positive() { 0.9 } else { 0.1 }).collect();
        let cfg = BoostConfig { folds: 2, max_trees: 20, ..BoostConfig::default() };
        let run = model_bm25_ensemble(&records, &scores, &records, &scores, &cfg).unwrap();
        let m = metrics_from_scores(&records, &run.test_scores, None).unwrap();
        assert_eq!(m.auc, 1.0);
        assert_eq!(run.validation.names, ["model_score", "bm25"]);
    }

    #[test]
    fn feature_file_round_trip() {
        let t = FeatureTable {
            names: vec!["model_score".into(), "bm25".into()],
            rows: vec![vec![0.1, 2.5], vec![1.0 / 3.0, 0.0]],
            targets: vec![true, false],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        write_features(&p, &t).unwrap();
        assert_eq!(load_features(&p).unwrap(), t);
        std::fs::write(&p, "a\tb\n1\t2\n").unwrap();
        assert!(load_features(&p).is_err());
        std::fs::write(&p, "a\ttarget\n1\t2\n").unwrap();
        assert!(matches!(load_features(&p), Err(Error::Parse { line: 2, .. })));
    }
}
