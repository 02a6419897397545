use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::EncoderKind;
use crate::models::{Architecture, ModelConfig, RankingModel};
use crate::tensor::Tape;
use crate::text::{EmbeddingTable, ProcessedText, Vocabulary};

struct Toy {
    table: Arc<EmbeddingTable>,
    train: Vec<Example>,
    valid: Vec<Example>,
}

fn toy(queries: usize, seed: u64) -> Toy {
    let size = 40;
    let vocab = Vocabulary::from_tokens((0..size).map(|i| format!("w{i}"))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..size * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let table = Arc::new(EmbeddingTable::with_reserved_rows(&vocab, rows, 6, 1).unwrap());
    let mut examples = Vec::new();
    for qi in 0..queries {
        let (a, b) = (rng.gen_range(0..20), rng.gen_range(20..size));
        let qtext = format!("w{a} w{b} q{qi}");
        let query = ProcessedText::query(&format!("w{a} w{b}"), &vocab);
        for r in 0..4 {
            let grade = RelevanceGrade::from_value([2, 1, 0, 0][r]).unwrap();
            let mut words: Vec<String> = (0..6)
                .map(|_| loop {
                    let w = rng.gen_range(0..size);
                    if w != a && w != b {
                        break format!("w{w}");
                    }
                })
                .collect();
            if grade.is_positive() {
                words[2] = format!("w{a}");
                words[3] = format!("w{b}");
            }
            let document = ProcessedText::document([words.join(" ").as_str()], &vocab);
            examples.push(Example { query_text: qtext.clone(), query: query.clone(), document, grade });
        }
    }
    let cut = examples.len() * 3 / 4;
    let valid = examples.split_off(cut);
    Toy { table, train: examples, valid }
}

fn small_model(table: &Arc<EmbeddingTable>) -> RankingModel {
    let cfg = ModelConfig {
        projection_dim: 4,
        doc_hidden: 3,
        query_hidden: 3,
        match_channels: 3,
        filters_first: 2,
        filters_second: 3,
        hidden: 4,
        ..ModelConfig::small(Architecture::MatchTensor, EncoderKind::Cnn)
    };
    RankingModel::new(cfg, table.clone(), 3).unwrap()
}

fn quick() -> TrainingConfig {
    TrainingConfig { learning_rate: 0.02, batch_size: 8, epochs: 1.0, dropout: 0.0, seed: 4, ..TrainingConfig::default() }
}

#[test]
fn bce_examples() {
    assert!((bce_loss(0.5, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(bce_loss(1.0 - 1e-15, 1.0).unwrap() < 1e-11);
    assert!(bce_loss(1.0, 1.0).is_err());
    assert!(bce_loss(0.5, 1.5).is_err());
    assert_eq!(bce_gradient(0.5, 1.0), -2.0);
    let mut tape = Tape::new();
    let p = tape.variable(crate::tensor::Tensor::scalar(0.5)).unwrap();
    let l = tape.binary_cross_entropy(p, 1.0).unwrap();
    tape.backward(l).unwrap();
    assert!((tape.grad(p).unwrap().unwrap()[0] + 2.0).abs() < 1e-12);
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let t = toy(6, 1);
    let m = small_model(&t.table);
    let before = m.store().flatten_trainable();
    let cfg = TrainingConfig { epochs: 0.0, ..quick() };
    let out = train(m, &t.train, &t.valid, &cfg).unwrap();
    assert_eq!(out.model.store().flatten_trainable(), before);
    assert_eq!(out.curve.len(), 1);
}

#[test]
fn empty_training_set_is_an_error() {
    let t = toy(2, 1);
    assert!(train(small_model(&t.table), &[], &t.valid, &quick()).is_err());
    let bad = TrainingConfig { batch_size: 0, ..quick() };
    assert!(train(small_model(&t.table), &t.train, &t.valid, &bad).is_err());
}

#[test]
fn training_reduces_validation_loss() {
    let t = toy(40, 2);
    let cfg = TrainingConfig { epochs: 3.0, keep_best: false, ..quick() };
    let out = train(small_model(&t.table), &t.train, &t.valid, &cfg).unwrap();
    let first = out.curve[0].validation_loss.unwrap();
    let last = out.curve.last().unwrap().validation_loss.unwrap();
    assert!(last < 0.9 * first, "{first} -> {last}");
    // Validation every quarter epoch.
    assert_eq!(out.curve.len(), 13);
    assert!((out.curve[1].epoch - 0.25).abs() < 0.05);
}

#[test]
fn training_is_reproducible() {
    let t = toy(10, 3);
    let cfg = TrainingConfig { dropout: 0.3, ..quick() };
    let a = train(small_model(&t.table), &t.train, &t.valid, &cfg).unwrap();
    let b = train(small_model(&t.table), &t.train, &t.valid, &cfg).unwrap();
    assert_eq!(a.model.store().flatten_trainable(), b.model.store().flatten_trainable());
    assert_eq!(a.curve, b.curve);
}

#[test]
fn keep_best_restores_lowest_validation_loss() {
    let t = toy(12, 5);
    let cfg = TrainingConfig { epochs: 2.0, ..quick() };
    let out = train(small_model(&t.table), &t.train, &t.valid, &cfg).unwrap();
    let min = out.curve.iter().filter_map(|c| c.validation_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_validation_loss, Some(min));
    let now = mean_loss(&out.model, &t.valid, false).unwrap();
    assert!((now - min).abs() < 1e-12);
}

#[test]
fn subsampling_is_by_query() {
    let t = toy(10, 6);
    let half = subsample_by_query(&t.train, 0.5, 1).unwrap();
    let queries: std::collections::HashSet<_> = half.iter().map(|e| &e.query_text).collect();
    for q in &queries {
        let all = t.train.iter().filter(|e| &&e.query_text == q).count();
        assert_eq!(half.iter().filter(|e| &&e.query_text == q).count(), all);
    }
    assert_eq!(subsample_by_query(&t.train, 1.0, 1).unwrap(), t.train);
    assert!(subsample_by_query(&t.train, 0.001, 1).is_err());
}

#[test]
fn random_search_singleton_and_determinism() {
    let t = toy(6, 7);
    let base = small_model(&t.table).config().clone();
    let training = TrainingConfig { epochs: 0.5, ..quick() };
    let data = ExperimentData { table: &t.table, train: &t.train, validation: &t.valid };
    let single = SearchSpace::singleton(&base, &training);
    let out = random_search(&base, &training, &single, 1, 10.0, data, 3, None).unwrap();
    assert_eq!(out.trials.len(), 1);
    assert_eq!(out.best.model, base);
    let out2 = random_search(&base, &training, &single, 2, 10.0, data, 3, None).unwrap();
    assert_eq!(out2.best.model, base);

    let space = SearchSpace { hidden: (2, 6), filters_first: (1, 3), epochs: (0.25, 1.0), ..single.clone() };
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    let a = random_search(&base, &training, &space, 3, 0.5, data, 11, Some(&log)).unwrap();
    let b = random_search(&base, &training, &space, 3, 0.5, data, 11, None).unwrap();
    assert_eq!(a.trials, b.trials);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["run_id", "config", "epoch", "split", "loss", "ndcg1", "ndcg3", "ndcg10", "err", "auc"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for r in &a.trials {
        let cfg: TrialConfig = serde_json::from_value(r.config.clone()).unwrap();
        assert!(cfg.training.epochs <= 0.5);
    }
    let empty = SearchSpace { hidden: (5, 2), ..single };
    assert!(random_search(&base, &training, &empty, 1, 1.0, data, 0, None).is_err());
}

#[test]
fn sweep_at_full_fraction_reproduces_training() {
    let t = toy(8, 8);
    let m = small_model(&t.table);
    let cfg = quick();
    let data = ExperimentData { table: &t.table, train: &t.train, validation: &t.valid };
    let pts = training_size_sweep(m.config(), &cfg, 3, data, &t.valid, &[1.0]).unwrap();
    let direct = train(m, &t.train, &t.valid, &cfg).unwrap();
    let loss = evaluate(&direct.model, &t.valid, false).unwrap().loss.unwrap();
    assert_eq!(pts[0].test_loss, loss);
    assert!(training_size_sweep(direct.model.config(), &cfg, 3, data, &t.valid, &[0.0]).is_err());
}

#[test]
fn model_gradient_check_passes_on_toy_model() {
    let t = toy(2, 9);
    let m = small_model(&t.table);
    let e = &t.train[0];
    let report = model_gradient_check(&m, &e.query, &e.document, 1.0, 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > report.kink_indices.len());
}

fn permutations(items: &[u8]) -> Vec<Vec<u8>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

#[test]
fn ndcg_matches_brute_force_over_all_orderings() {
    // Reference: ideal DCG as the maximum DCG over every ordering.
    let dcg = |g: &[u8], k: usize| -> f64 {
        let mut s = 0.0;
        for (i, &x) in g.iter().enumerate().take(k) {
            s += (2f64.powi(i32::from(x)) - 1.0) / (i as f64 + 2.0).log2();
        }
        s
    };
    let grades = [2u8, 1, 0, 1];
    let perms = permutations(&grades);
    assert_eq!(perms.len(), 24);
    for k in 1..=4 {
        let ideal = perms.iter().map(|p| dcg(p, k)).fold(0.0, f64::max);
        for p in &perms {
            assert!((ndcg_at_k(p, k).unwrap() - dcg(p, k) / ideal).abs() <= 1e-12);
        }
    }
}

#[test]
fn metrics_ignore_relabeling_of_equal_documents() {
    let q = |r: Vec<(f64, RelevanceGrade)>| vec![RankedQuery { query: "q".into(), results: r }];
    use RelevanceGrade::*;
    let a = MetricsReport::from_rankings(&q(vec![(0.9, Vital), (0.5, Relevant), (0.5, Relevant), (0.1, NonRelevant)]), None).unwrap();
    let b = MetricsReport::from_rankings(&q(vec![(0.1, NonRelevant), (0.5, Relevant), (0.9, Vital), (0.5, Relevant)]), None).unwrap();
    assert_eq!(a.ndcg3, b.ndcg3);
    assert_eq!(a.err, b.err);
    assert_eq!(a.auc, b.auc);
}
