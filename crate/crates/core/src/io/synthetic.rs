use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_dataset, DatasetSplit, Document, Split, TripletRecord};
use crate::error::{Error, Result};
use crate::text::{write_embeddings, EmbeddingTable, Vocabulary, DEFAULT_RESERVED_SEED};
use crate::train::RelevanceGrade;

pub const QUERY_LENGTH: (usize, usize) = (2, 6);
pub const DOCUMENT_LENGTH: (usize, usize) = (20, 120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Relevant documents contain the query terms; the rest share none.
    ExactMatch,
    /// Every document holds the query terms once; only their order differs.
    OrderSensitive,
    /// Relevant documents use same-cluster synonyms and never the query terms.
    Semantic,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ExactMatch, TaskKind::OrderSensitive, TaskKind::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ExactMatch => "exact_match",
            TaskKind::OrderSensitive => "order_sensitive",
            TaskKind::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown task {s:?} (expected exact_match, order_sensitive or semantic)"))
        })
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    /// Distinct queries in train, validation and test.
    pub queries: [usize; 3],
    pub results_per_query: usize,
    /// Fractions of VITAL, RELEVANT and NONRELEVANT results per query.
    pub grade_distribution: [f64; 3],
    pub embedding_dim: usize,
    /// Tokens per synonym cluster (semantic task).
    pub cluster_size: usize,
    /// Synonyms written per matched query term (semantic task).
    pub mentions: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            vocab_size: 2000,
            queries: [300, 60, 100],
            results_per_query: 17,
            grade_distribution: [0.10, 0.35, 0.55],
            embedding_dim: 32,
            cluster_size: 100,
            mentions: 3,
            seed,
        }
    }

    /// Results per grade, VITAL first.
    pub fn grade_counts(&self) -> Result<[usize; 3]> {
        let r = self.results_per_query;
        let [v, rel, _] = self.grade_distribution;
        if self.grade_distribution.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("grade fractions must lie in [0, 1]".into()));
        }
        let vital = (v * r as f64).round() as usize;
        let relevant = ((rel * r as f64).round() as usize).min(r - vital.min(r));
        if vital + relevant == 0 || vital + relevant >= r {
            return Err(Error::InvalidArgument(format!(
                "grade distribution {:?} over {r} results leaves no relevant or no non-relevant result",
                self.grade_distribution
            )));
        }
        Ok([vital, relevant, r - vital - relevant])
    }

    fn validate(&self) -> Result<()> {
        if self.results_per_query < 2 {
            return Err(Error::InvalidArgument("at least two results per query are needed".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        self.grade_counts()?;
        let max_q = QUERY_LENGTH.1;
        match self.task {
            TaskKind::Semantic => {
                if self.cluster_size < 2 {
                    return Err(Error::InvalidArgument("synonym clusters need at least two tokens".into()));
                }
                if self.mentions == 0 {
                    return Err(Error::InvalidArgument("semantic documents need at least one mention per term".into()));
                }
                if self.vocab_size / self.cluster_size < max_q + 2 {
                    return Err(Error::InvalidArgument(format!(
                        "vocabulary of {} gives too few clusters for {max_q}-token queries",
                        self.vocab_size
                    )));
                }
            }
            _ => {
                if self.vocab_size < 2 * max_q + 10 {
                    return Err(Error::InvalidArgument(format!("vocabulary of {} is too small", self.vocab_size)));
                }
            }
        }
        Ok(())
    }
}

/// A generated dataset with its vocabulary and embedding table.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticTaskSpec,
    pub dataset: DatasetSplit,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

impl SyntheticCorpus {
    /// Writes `data.tsv`, `embeddings.vec` and the settings as `task.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_dataset(dir.join("data.tsv"), &self.dataset)?;
        write_embeddings(dir.join("embeddings.vec"), &self.vocab, &self.table)?;
        crate::io::write_atomic(&dir.join("task.json"), serde_json::to_string_pretty(&self.spec)?.as_bytes())?;
        Ok(())
    }
}

fn token(i: usize) -> String {
    format!("t{i}")
}

struct Generator<'a> {
    spec: &'a SyntheticTaskSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn clusters(&self) -> usize {
        self.spec.vocab_size / self.spec.cluster_size
    }

    fn cluster_of(&self, t: usize) -> usize {
        t / self.spec.cluster_size
    }

    fn embeddings(&mut self) -> Vec<f64> {
        let d = self.spec.embedding_dim;
        let limit = (3.0 / d as f64).sqrt();
        match self.spec.task {
            TaskKind::Semantic => {
                let centers: Vec<f64> = (0..self.clusters() * d).map(|_| self.rng.gen_range(-limit..limit)).collect();
                let mut out = Vec::with_capacity(self.spec.vocab_size * d);
                for t in 0..self.spec.vocab_size {
                    let c = self.cluster_of(t).min(self.clusters() - 1);
                    for k in 0..d {
                        out.push(centers[c * d + k] + 0.25 * self.rng.gen_range(-limit..limit));
                    }
                }
                out
            }
            _ => (0..self.spec.vocab_size * d).map(|_| self.rng.gen_range(-limit..limit)).collect(),
        }
    }

    fn query_tokens(&mut self) -> Vec<usize> {
        let len = self.rng.gen_range(QUERY_LENGTH.0..=QUERY_LENGTH.1);
        match self.spec.task {
            TaskKind::Semantic => {
                let mut clusters: Vec<usize> = (0..self.clusters()).collect();
                clusters.shuffle(&mut self.rng);
                clusters[..len]
                    .iter()
                    .map(|&c| c * self.spec.cluster_size + self.rng.gen_range(0..self.spec.cluster_size))
                    .collect()
            }
            _ => rand::seq::index::sample(&mut self.rng, self.spec.vocab_size, len).into_vec(),
        }
    }

    fn filler(&mut self, query: &[usize], n: usize) -> Vec<usize> {
        let banned_clusters: HashSet<usize> = query.iter().map(|&t| self.cluster_of(t)).collect();
        let semantic = self.spec.task == TaskKind::Semantic;
        let usable = self.clusters() * self.spec.cluster_size;
        (0..n)
            .map(|_| loop {
                let t = self.rng.gen_range(0..usable.max(1));
                let bad = if semantic { banned_clusters.contains(&self.cluster_of(t)) } else { query.contains(&t) };
                if !bad {
                    break t;
                }
            })
            .collect()
    }

    fn synonym(&mut self, t: usize) -> usize {
        let c = self.cluster_of(t);
        loop {
            let s = c * self.spec.cluster_size + self.rng.gen_range(0..self.spec.cluster_size);
            if s != t {
                return s;
            }
        }
    }

    /// A permutation of `0..n` that keeps no adjacent pair of the original order.
    fn breaking_permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        loop {
            p.shuffle(&mut self.rng);
            if p.windows(2).all(|w| w[1] != w[0] + 1) {
                return p;
            }
        }
    }

    /// `count` non-adjacent positions in `0..len`, ascending.
    fn scattered_positions(&mut self, len: usize, count: usize) -> Vec<usize> {
        let mut base = rand::seq::index::sample(&mut self.rng, len + 1 - count, count).into_vec();
        base.sort_unstable();
        base.iter().enumerate().map(|(i, &p)| p + i).collect()
    }

    fn document(&mut self, query: &[usize], grade: RelevanceGrade) -> (Vec<usize>, Vec<usize>) {
        let total = self.rng.gen_range(DOCUMENT_LENGTH.0..=DOCUMENT_LENGTH.1);
        let q = query.len();
        let title_len = self.rng.gen_range(q..=q + 3);
        let mut title = self.filler(query, title_len);
        let mut body = self.filler(query, total - title_len);
        match self.spec.task {
            TaskKind::ExactMatch => match grade {
                RelevanceGrade::Vital => {
                    let at = self.rng.gen_range(0..=body.len() - q);
                    body[at..at + q].copy_from_slice(query);
                }
                RelevanceGrade::Relevant => {
                    let mut terms = query.to_vec();
                    terms.shuffle(&mut self.rng);
                    for (p, t) in self.scattered_positions(body.len(), q).into_iter().zip(terms) {
                        body[p] = t;
                    }
                }
                RelevanceGrade::NonRelevant => {}
            },
            TaskKind::OrderSensitive => {
                let (phrase, in_title) = match grade {
                    RelevanceGrade::Vital => (query.to_vec(), true),
                    RelevanceGrade::Relevant => (query.to_vec(), false),
                    RelevanceGrade::NonRelevant => {
                        let perm = self.breaking_permutation(q);
                        (perm.iter().map(|&i| query[i]).collect(), self.rng.gen_bool(0.5))
                    }
                };
                let field = if in_title { &mut title } else { &mut body };
                let at = self.rng.gen_range(0..=field.len() - q);
                field[at..at + q].copy_from_slice(&phrase);
            }
            TaskKind::Semantic => {
                let mut concepts = query.to_vec();
                concepts.shuffle(&mut self.rng);
                concepts.truncate(match grade {
                    RelevanceGrade::Vital => q,
                    RelevanceGrade::Relevant => q.div_ceil(2),
                    RelevanceGrade::NonRelevant => 0,
                });
                let mut mentions: Vec<usize> = Vec::new();
                for &t in &concepts {
                    for _ in 0..self.spec.mentions {
                        mentions.push(self.synonym(t));
                    }
                }
                mentions.truncate(body.len());
                let positions = rand::seq::index::sample(&mut self.rng, body.len(), mentions.len());
                for (p, t) in positions.into_iter().zip(mentions) {
                    body[p] = t;
                }
            }
        }
        (title, body)
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|&i| token(i)).collect::<Vec<_>>().join(" ")
}

/// Generates a seeded synthetic corpus for `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let counts = spec.grade_counts()?;
    let mut g = Generator { spec, rng: ChaCha8Rng::seed_from_u64(spec.seed) };
    let rows = g.embeddings();
    let vocab = Vocabulary::from_tokens((0..spec.vocab_size).map(token))?;
    let table = EmbeddingTable::with_reserved_rows(&vocab, rows, spec.embedding_dim, DEFAULT_RESERVED_SEED)?;
    let mut used = HashSet::new();
    let mut dataset = DatasetSplit::default();
    for (split, &n) in Split::ALL.iter().zip(&spec.queries) {
        let out = match split {
            Split::Train => &mut dataset.train,
            Split::Validation => &mut dataset.validation,
            Split::Test => &mut dataset.test,
        };
        for _ in 0..n {
            let mut attempts = 0;
            let query = loop {
                let q = g.query_tokens();
                if used.insert(join(&q)) {
                    break q;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::InvalidArgument(format!(
                        "vocabulary of {} cannot supply {} distinct queries",
                        spec.vocab_size,
                        spec.queries.iter().sum::<usize>()
                    )));
                }
            };
            let mut grades: Vec<RelevanceGrade> = RelevanceGrade::ALL
                .iter()
                .rev()
                .zip(counts)
                .flat_map(|(&grade, c)| std::iter::repeat_n(grade, c))
                .collect();
            grades.shuffle(&mut g.rng);
            let qtext = join(&query);
            for grade in grades {
                let (title, body) = g.document(&query, grade);
                out.push(TripletRecord {
                    query: qtext.clone(),
                    document: Document { title: join(&title), author: String::new(), body: join(&body) },
                    grade,
                });
            }
        }
    }
    dataset.check_disjoint()?;
    Ok(SyntheticCorpus { spec: spec.clone(), dataset, vocab, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{bm25_score, Bm25Params, CorpusStats};
    use crate::text::tokenize;
    use crate::train::roc_auc;

    fn small(task: TaskKind, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec { queries: [40, 10, 40], vocab_size: 400, cluster_size: 20, ..SyntheticTaskSpec::new(task, seed) }
    }

    fn doc_tokens(r: &TripletRecord) -> Vec<String> {
        r.document.fields().iter().flat_map(|f| tokenize(f)).collect()
    }

    fn bm25_auc(records: &[TripletRecord]) -> f64 {
        let docs: Vec<Vec<String>> = records.iter().map(doc_tokens).collect();
        let stats = CorpusStats::from_documents(docs.iter().map(Vec::as_slice)).unwrap();
        let scores: Vec<f64> = records
            .iter()
            .zip(&docs)
            .map(|(r, d)| bm25_score(&tokenize(&r.query), d, &stats, Bm25Params::default()))
            .collect();
        let labels: Vec<bool> = records.iter().map(|r| r.grade.is_positive()).collect();
        roc_auc(&scores, &labels).unwrap()
    }

    #[test]
    fn reproducible_bit_for_bit() {
        for task in TaskKind::ALL {
            let a = generate_synthetic(&small(task, 3)).unwrap();
            let b = generate_synthetic(&small(task, 3)).unwrap();
            assert_eq!(a.dataset, b.dataset);
            assert_eq!(a.table, b.table);
            let c = generate_synthetic(&small(task, 4)).unwrap();
            assert_ne!(a.dataset.fingerprint(), c.dataset.fingerprint());
        }
    }

    #[test]
    fn shapes_and_grade_mix() {
        for task in TaskKind::ALL {
            let c = generate_synthetic(&small(task, 1)).unwrap();
            assert_eq!(c.dataset.train.len(), 40 * 17);
            c.dataset.check_disjoint().unwrap();
            for group in c.dataset.test.chunks(17) {
                assert!(group.iter().all(|r| r.query == group[0].query));
                let vital = group.iter().filter(|r| r.grade == RelevanceGrade::Vital).count();
                let rel = group.iter().filter(|r| r.grade == RelevanceGrade::Relevant).count();
                assert_eq!((vital, rel), (2, 6));
                let qlen = tokenize(&group[0].query).len();
                assert!((2..=6).contains(&qlen));
                for r in group {
                    let n = doc_tokens(r).len();
                    assert!((20..=120).contains(&n), "{n}");
                }
            }
        }
    }

    #[test]
    fn exact_match_overlap_rule() {
        let c = generate_synthetic(&small(TaskKind::ExactMatch, 2)).unwrap();
        for r in &c.dataset.train {
            let q: HashSet<String> = tokenize(&r.query).into_iter().collect();
            let d: HashSet<String> = doc_tokens(r).into_iter().collect();
            if r.grade.is_positive() {
                assert!(q.is_subset(&d));
            } else {
                assert!(q.is_disjoint(&d));
            }
        }
        assert!(bm25_auc(&c.dataset.test) >= 0.95);
    }

    #[test]
    fn order_sensitive_keeps_token_counts() {
        let c = generate_synthetic(&small(TaskKind::OrderSensitive, 2)).unwrap();
        for r in &c.dataset.train {
            let q = tokenize(&r.query);
            let d = doc_tokens(r);
            for t in &q {
                assert_eq!(d.iter().filter(|x| *x == t).count(), 1);
            }
            let contains_phrase = d.windows(q.len()).any(|w| w == q.as_slice());
            assert_eq!(contains_phrase, r.grade.is_positive());
            if !r.grade.is_positive() {
                for pair in q.windows(2) {
                    assert!(!d.windows(2).any(|w| w == pair), "bigram kept");
                }
            }
        }
        let auc = bm25_auc(&c.dataset.test);
        assert!((auc - 0.5).abs() <= 0.05, "{auc}");
    }

    #[test]
    fn semantic_has_no_lexical_overlap() {
        let spec = small(TaskKind::Semantic, 2);
        let c = generate_synthetic(&spec).unwrap();
        let cluster = |t: &str| t[1..].parse::<usize>().unwrap() / spec.cluster_size;
        for r in &c.dataset.train {
            let q = tokenize(&r.query);
            let d = doc_tokens(r);
            assert!(q.iter().all(|t| !d.contains(t)));
            let qc: HashSet<usize> = q.iter().map(|t| cluster(t)).collect();
            let shared = d.iter().filter(|t| qc.contains(&cluster(t))).count();
            assert_eq!(shared > 0, r.grade.is_positive());
        }
        // Synonyms sit closer than unrelated tokens.
        let v = &c.vocab;
        let dot = |a: &str, b: &str| -> f64 {
            c.table.row(v.id(a)).iter().zip(c.table.row(v.id(b))).map(|(x, y)| x * y).sum()
        };
        assert!(dot("t0", "t1") > dot("t0", "t100"));
        assert!(bm25_auc(&c.dataset.test) <= 0.6);
    }

    #[test]
    fn too_small_vocabulary_is_rejected() {
        let spec = SyntheticTaskSpec { vocab_size: 12, ..small(TaskKind::ExactMatch, 1) };
        assert!(generate_synthetic(&spec).is_err());
        let spec = SyntheticTaskSpec { vocab_size: 56, ..small(TaskKind::Semantic, 1) };
        assert!(generate_synthetic(&spec).is_err());
        let bad = SyntheticTaskSpec { grade_distribution: [0.0, 0.0, 1.0], ..small(TaskKind::ExactMatch, 1) };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn writes_loadable_files() {
        let c = generate_synthetic(&SyntheticTaskSpec { queries: [3, 2, 2], ..small(TaskKind::Semantic, 5) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let d = super::super::dataset::load_dataset(dir.path().join("data.tsv")).unwrap();
        assert_eq!(d, c.dataset);
        let (v, t) = crate::text::load_embeddings(dir.path().join("embeddings.vec")).unwrap();
        assert_eq!(v, c.vocab);
        assert_eq!(t, c.table);
    }
}
