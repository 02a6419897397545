use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use matchtensor::baselines::{bm25_score, Bm25Params, CorpusStats};
use matchtensor::io::bm25_scores;
use matchtensor::text::tokenize;
use matchtensor::train::{err, ndcg_at_k, roc_auc};
use matchtensor::{Architecture, EncoderKind, Mode, ModelConfig, RankingModel};
use matchtensor_bench::fixture;

fn models(c: &mut Criterion) {
    let (table, _, examples) = fixture();
    let e = &examples[0];
    for arch in Architecture::ALL {
        for encoder in [EncoderKind::BiLstm, EncoderKind::Cnn] {
            let model = RankingModel::new(ModelConfig::small(arch, encoder), table.clone(), 0).unwrap();
            c.bench_function(&format!("score/{arch}/{encoder}"), |b| {
                b.iter(|| model.score(black_box(&e.query), black_box(&e.document)).unwrap())
            });
            c.bench_function(&format!("backward/{arch}/{encoder}"), |b| {
                b.iter(|| model.loss_and_gradient(&e.query, &e.document, 1.0, Mode::Train, 3).unwrap())
            });
        }
    }
}

fn metrics(c: &mut Criterion) {
    let grades: Vec<u8> = (0..100).map(|i| ((i * 7) % 3) as u8).collect();
    let scores: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64).collect();
    let labels: Vec<bool> = (0..10_000).map(|i| i % 3 == 0).collect();
    c.bench_function("ndcg@10/100", |b| b.iter(|| ndcg_at_k(black_box(&grades), 10)));
    c.bench_function("err/100", |b| b.iter(|| err(black_box(&grades))));
    c.bench_function("auc/10000", |b| b.iter(|| roc_auc(black_box(&scores), black_box(&labels)).unwrap()));
}

fn bm25(c: &mut Criterion) {
    let (_, records, _) = fixture();
    let docs: Vec<Vec<String>> =
        records.iter().map(|r| r.document.fields().iter().flat_map(|f| tokenize(f)).collect()).collect();
    let stats = CorpusStats::from_documents(docs.iter().map(Vec::as_slice)).unwrap();
    let query = tokenize(&records[0].query);
    c.bench_function("bm25/stats", |b| {
        b.iter(|| CorpusStats::from_documents(black_box(&docs).iter().map(Vec::as_slice)).unwrap())
    });
    c.bench_function("bm25/score_split", |b| {
        b.iter(|| docs.iter().map(|d| bm25_score(&query, d, &stats, Bm25Params::default())).sum::<f64>())
    });
    c.bench_function("bm25/end_to_end", |b| b.iter(|| bm25_scores(black_box(&records), Bm25Params::default()).unwrap()));
}

criterion_group!(benches, models, metrics, bm25);
criterion_main!(benches);
