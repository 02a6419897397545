use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use matchtensor::baselines::{BoostConfig, Bm25Params};
use matchtensor::io::{
    format_delta_table, generate_synthetic, load_dataset, metrics_from_scores, model_bm25_ensemble, prepare_examples,
    relative_deltas, write_atomic, write_features, DatasetSplit, MetricsSnapshot, RunManifest, Scorer, Split,
    SyntheticTaskSpec,
};
use matchtensor::text::load_embeddings;
use matchtensor::train::{
    evaluate, random_search, train, training_size_sweep, write_jsonl, Example, ExperimentData, MetricsReport,
    ReportRecord, SearchSpace,
};
use matchtensor::{EmbeddingTable, ModelConfig, RankingModel, TrainingConfig, Vocabulary};

use crate::config::Settings;
use crate::{Command, DataArgs, ModelArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { task, seed, out, config } => generate(task, seed, &out, config.as_deref()),
        Command::Train(args) => train_command(&args),
        Command::Evaluate { data, manifest, bm25, arch, encoder, seed, config, out } => {
            let mut settings = Settings::load(config.as_deref())?;
            let loaded = Loaded::dataset(&data)?;
            let (manifest, name) = match (manifest, bm25, arch) {
                (Some(path), _, _) => {
                    (RunManifest::load(&path).with_context(|| format!("loading {}", path.display()))?, "evaluation")
                }
                (None, true, _) => (RunManifest::for_bm25(Bm25Params::default(), loaded.dataset.fingerprint()), "bm25"),
                (None, false, Some(arch)) => {
                    let (vocab, table) = loaded.embeddings(&data)?;
                    let mut cfg = ModelConfig::small(arch, encoder);
                    settings.model(&mut cfg)?;
                    let model = RankingModel::new(cfg, Arc::new(table), seed)?;
                    let seeds = BTreeMap::from([("model".to_string(), seed)]);
                    (RunManifest::for_model(&model, &vocab, None, seeds, loaded.dataset.fingerprint()), "untrained")
                }
                (None, false, None) => bail!("evaluate needs one of --manifest, --bm25 or --arch"),
            };
            settings.finish()?;
            evaluate_command(manifest, &loaded.dataset, &out, name)
        }
        Command::Compare { baseline, candidate, split, data, out } => {
            compare(&baseline, &candidate, split, data.as_deref(), out.as_deref())
        }
        Command::Sweep { model, runs } => sweep(&model, runs),
        Command::SizeSweep { model, fractions } => size_sweep(&model, &fractions),
        Command::Ensemble { data, manifest, seed, config, out } => {
            ensemble(&data, &manifest, seed, config.as_deref(), &out)
        }
    }
}

fn generate(task: matchtensor::io::TaskKind, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut settings = Settings::load(config)?;
    let mut spec = SyntheticTaskSpec::new(task, seed);
    settings.synthetic(&mut spec)?;
    settings.finish()?;
    let corpus = generate_synthetic(&spec)?;
    corpus.write(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} triplets ({} train / {} validation / {} test) to {}",
        corpus.dataset.len(),
        corpus.dataset.train.len(),
        corpus.dataset.validation.len(),
        corpus.dataset.test.len(),
        out.display()
    );
    Ok(())
}

struct Loaded {
    dataset: DatasetSplit,
    data_path: PathBuf,
}

impl Loaded {
    fn dataset(args: &DataArgs) -> Result<Self> {
        let data_path = if args.data.is_dir() { args.data.join("data.tsv") } else { args.data.clone() };
        let dataset = load_dataset(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
        Ok(Self { dataset, data_path })
    }

    fn embeddings(&self, args: &DataArgs) -> Result<(Vocabulary, EmbeddingTable)> {
        let path = match &args.embeddings {
            Some(p) => p.clone(),
            None => self.data_path.with_file_name("embeddings.vec"),
        };
        load_embeddings(&path).with_context(|| format!("loading {}", path.display()))
    }
}

struct Prepared {
    loaded: Loaded,
    vocab: Vocabulary,
    table: Arc<EmbeddingTable>,
    train: Vec<Example>,
    validation: Vec<Example>,
    test: Vec<Example>,
    model: ModelConfig,
    training: TrainingConfig,
}

fn prepare(args: &ModelArgs, extra: impl FnOnce(&mut Settings) -> Result<()>) -> Result<Prepared> {
    let mut settings = Settings::load(args.config.as_deref())?;
    let mut model = ModelConfig::small(args.arch, args.encoder);
    settings.model(&mut model)?;
    let mut training = TrainingConfig { seed: args.seed, ..TrainingConfig::default() };
    settings.training(&mut training)?;
    extra(&mut settings)?;
    settings.finish()?;
    model.validate()?;
    training.validate()?;
    let loaded = Loaded::dataset(&args.data)?;
    let (vocab, table) = loaded.embeddings(&args.data)?;
    let d = &loaded.dataset;
    if d.train.is_empty() || d.validation.is_empty() {
        bail!("training needs non-empty train and validation splits");
    }
    let train = prepare_examples(&d.train, &vocab);
    let validation = prepare_examples(&d.validation, &vocab);
    let test = prepare_examples(&d.test, &vocab);
    Ok(Prepared { vocab, table: Arc::new(table), train, validation, test, model, training, loaded })
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn print_metrics(label: &str, m: &MetricsSnapshot) {
    println!(
        "{label:<12} loss {} ndcg@1 {:.4} ndcg@3 {:.4} ndcg@10 {:.4} err {:.4} auc {:.4}",
        m.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}")),
        m.ndcg1,
        m.ndcg3,
        m.ndcg10,
        m.err,
        m.auc
    );
}

fn train_command(args: &ModelArgs) -> Result<()> {
    let p = prepare(args, |_| Ok(()))?;
    create_out(&args.out)?;
    let model = RankingModel::new(p.model.clone(), p.table.clone(), args.seed)?;
    let outcome = train(model, &p.train, &p.validation, &p.training)?;
    let seeds = BTreeMap::from([("model".to_string(), args.seed), ("training".to_string(), p.training.seed)]);
    let mut manifest =
        RunManifest::for_model(&outcome.model, &p.vocab, Some(p.training.clone()), seeds, p.loaded.dataset.fingerprint());
    let mut records = Vec::new();
    let config = serde_json::to_value((&p.model, &p.training))?;
    for (split, examples) in [(Split::Validation, &p.validation), (Split::Test, &p.test)] {
        if examples.is_empty() {
            continue;
        }
        let m = evaluate(&outcome.model, examples, p.training.binary_targets)?;
        records.push(ReportRecord::from_metrics("train", config.clone(), outcome.best_epoch, split.name(), &m));
        manifest.metrics.insert(split.name().to_string(), MetricsSnapshot::from(&m));
    }
    manifest.save(args.out.join("model.manifest"))?;
    write_jsonl(args.out.join("curve.jsonl"), &outcome.curve)?;
    write_jsonl(args.out.join("metrics.jsonl"), &records)?;
    println!("best epoch {:.2}, validation loss {:?}", outcome.best_epoch, outcome.best_validation_loss);
    for (split, m) in &manifest.metrics {
        print_metrics(split, m);
    }
    println!("wrote {}", args.out.join("model.manifest").display());
    Ok(())
}

fn split_metrics(scorer: &Scorer, dataset: &DatasetSplit, split: Split, binary: bool) -> Result<MetricsReport> {
    let records = dataset.get(split);
    match scorer {
        Scorer::Neural { vocab, model } => Ok(evaluate(model, &prepare_examples(records, vocab), binary)?),
        Scorer::Bm25 { .. } => Ok(metrics_from_scores(records, &scorer.score_records(records)?, None)?),
    }
}

fn evaluate_command(mut manifest: RunManifest, dataset: &DatasetSplit, out: &Path, name: &str) -> Result<()> {
    create_out(out)?;
    let scorer = manifest.scorer()?;
    let binary = manifest.training.as_ref().is_some_and(|t| t.binary_targets);
    let mut records = Vec::new();
    for split in [Split::Validation, Split::Test] {
        if dataset.get(split).is_empty() {
            continue;
        }
        let m = split_metrics(&scorer, dataset, split, binary)?;
        let snap = MetricsSnapshot::from(&m);
        print_metrics(split.name(), &snap);
        records.push(ReportRecord::from_metrics("evaluate", serde_json::to_value(&manifest.model)?, 0.0, split.name(), &m));
        manifest.metrics.insert(split.name().to_string(), snap);
    }
    if records.is_empty() {
        bail!("dataset has no validation or test triplets to evaluate");
    }
    manifest.dataset_fingerprint = dataset.fingerprint();
    let path = out.join(format!("{name}.manifest"));
    manifest.save(&path)?;
    println!("wrote {}", path.display());
    write_jsonl(out.join("metrics.jsonl"), &records)?;
    Ok(())
}

fn compare(baseline: &Path, candidate: &Path, split: Split, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let load = |p: &Path| RunManifest::load(p).with_context(|| format!("loading {}", p.display()));
    let (b, c) = (load(baseline)?, load(candidate)?);
    let snapshot = |m: &RunManifest, path: &Path| -> Result<MetricsSnapshot> {
        match data {
            Some(d) => {
                let loaded = Loaded::dataset(&DataArgs { data: d.to_path_buf(), embeddings: None })?;
                let binary = m.training.as_ref().is_some_and(|t| t.binary_targets);
                Ok(MetricsSnapshot::from(&split_metrics(&m.scorer()?, &loaded.dataset, split, binary)?))
            }
            None => m.metrics.get(split.name()).copied().with_context(|| {
                format!("{} has no {} metrics; evaluate it first or pass --data", path.display(), split.name())
            }),
        }
    };
    let deltas = relative_deltas(&snapshot(&b, baseline)?, &snapshot(&c, candidate)?);
    let name = |p: &Path| p.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    print!("{}", format_delta_table(&name(baseline), &name(candidate), &deltas));
    if let Some(out) = out {
        create_out(out)?;
        write_json(&out.join("compare.json"), &deltas)?;
    }
    Ok(())
}

fn sweep(args: &ModelArgs, runs: usize) -> Result<()> {
    let mut space = None;
    let mut budget = None;
    let p = prepare(args, |s| {
        let base_model = ModelConfig::small(args.arch, args.encoder);
        let mut sp = SearchSpace {
            hidden: (4, 32),
            match_channels: (4, 16),
            filters_first: (2, 12),
            filters_second: (4, 16),
            learning_rate: (3e-4, 1e-2),
            dropout: (0.0, 0.3),
            ..SearchSpace::singleton(&base_model, &TrainingConfig::default())
        };
        s.search(&mut sp)?;
        budget = Some(s.value("budget_epochs", f64::INFINITY)?);
        space = Some(sp);
        Ok(())
    })?;
    let mut space = space.expect("set by prepare");
    if space.epochs == (TrainingConfig::default().epochs, TrainingConfig::default().epochs) {
        space.epochs = (p.training.epochs, p.training.epochs);
    }
    create_out(&args.out)?;
    let data = ExperimentData { table: &p.table, train: &p.train, validation: &p.validation };
    let log = args.out.join("trials.jsonl");
    let outcome = random_search(&p.model, &p.training, &space, runs, budget.unwrap_or(f64::INFINITY), data, args.seed, Some(&log))?;
    for r in &outcome.trials {
        println!("{} validation loss {:?} auc {:.4}", r.run_id, r.loss, r.auc);
    }
    println!("best {}", outcome.best_record.run_id);
    let model = RankingModel::new(outcome.best.model.clone(), p.table.clone(), args.seed)?;
    let trained = train(model, &p.train, &p.validation, &outcome.best.training)?;
    let seeds = BTreeMap::from([("search".to_string(), args.seed), ("training".to_string(), outcome.best.training.seed)]);
    let mut manifest = RunManifest::for_model(
        &trained.model,
        &p.vocab,
        Some(outcome.best.training.clone()),
        seeds,
        p.loaded.dataset.fingerprint(),
    );
    for (split, examples) in [(Split::Validation, &p.validation), (Split::Test, &p.test)] {
        if !examples.is_empty() {
            let m = evaluate(&trained.model, examples, outcome.best.training.binary_targets)?;
            manifest.metrics.insert(split.name().to_string(), MetricsSnapshot::from(&m));
        }
    }
    manifest.save(args.out.join("best.manifest"))?;
    write_json(&args.out.join("best_config.json"), &outcome.best)?;
    Ok(())
}

fn size_sweep(args: &ModelArgs, fractions: &[f64]) -> Result<()> {
    let p = prepare(args, |_| Ok(()))?;
    if p.test.is_empty() {
        bail!("size-sweep needs a non-empty test split");
    }
    create_out(&args.out)?;
    let data = ExperimentData { table: &p.table, train: &p.train, validation: &p.validation };
    let points = training_size_sweep(&p.model, &p.training, args.seed, data, &p.test, fractions)?;
    println!("{:>8} {:>8} {:>9} {:>10} {:>8}", "fraction", "queries", "examples", "test loss", "auc");
    for pt in &points {
        println!("{:>8.3} {:>8} {:>9} {:>10.4} {:>8.4}", pt.fraction, pt.queries, pt.examples, pt.test_loss, pt.test_auc);
    }
    write_jsonl(args.out.join("size_sweep.jsonl"), &points)?;
    Ok(())
}

fn ensemble(data: &DataArgs, manifest: &Path, seed: u64, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut settings = Settings::load(config)?;
    let mut boost = BoostConfig { seed, ..BoostConfig::default() };
    settings.boost(&mut boost)?;
    settings.finish()?;
    let loaded = Loaded::dataset(data)?;
    let d = &loaded.dataset;
    if d.validation.is_empty() || d.test.is_empty() {
        bail!("ensemble needs non-empty validation and test splits");
    }
    let m = RunManifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let scorer = m.scorer()?;
    if matches!(scorer, Scorer::Bm25 { .. }) {
        bail!("ensemble needs a neural model manifest");
    }
    let val_scores = scorer.score_records(&d.validation)?;
    let test_scores = scorer.score_records(&d.test)?;
    let run = model_bm25_ensemble(&d.validation, &val_scores, &d.test, &test_scores, &boost)?;
    create_out(out)?;
    write_features(out.join("features_validation.tsv"), &run.validation)?;
    write_features(out.join("features_test.tsv"), &run.test)?;
    write_json(&out.join("ensemble.json"), &run.ensemble)?;
    let bm25: Vec<f64> = run.test.rows.iter().map(|r| r[1]).collect();
    let mut records = Vec::new();
    for (name, scores) in [("model", &test_scores), ("bm25", &bm25), ("ensemble", &run.test_scores)] {
        let metrics = metrics_from_scores(&d.test, scores, None)?;
        print_metrics(name, &MetricsSnapshot::from(&metrics));
        records.push(ReportRecord::from_metrics(name, serde_json::to_value(&boost)?, 0.0, "test", &metrics));
    }
    println!("trees {}", run.ensemble.trees.len());
    write_jsonl(out.join("metrics.jsonl"), &records)?;
    Ok(())
}
