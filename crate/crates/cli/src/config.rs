//! `key=value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use matchtensor::baselines::BoostConfig;
use matchtensor::io::SyntheticTaskSpec;
use matchtensor::train::SearchSpace;
use matchtensor::{ModelConfig, TrainingConfig};

/// Settings read from a config file. Every key must be consumed by the
/// command, so typos fail loudly.
#[derive(Debug, Default)]
pub struct Settings {
    source: String,
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{source}:{}: expected key=value", i + 1))?;
            let key = k.trim().to_string();
            if values.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                bail!("{source}:{}: duplicate key {key:?}", i + 1);
            }
        }
        Ok(Self { source: source.to_string(), values })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("{}:{line}: bad value {v:?} for {key}: {e}", self.source)),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_range<T: FromStr + Copy>(&mut self, key: &str, slot: &mut (T, T)) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, v)) = self.values.remove(key) {
            let (lo, hi) = v.split_once("..").unwrap_or((&v, &v));
            let parse = |s: &str| {
                s.trim().parse::<T>().map_err(|e| anyhow!("{}:{line}: bad range {v:?} for {key}: {e}", self.source))
            };
            *slot = (parse(lo)?, parse(hi)?);
        }
        Ok(())
    }

    pub fn model(&mut self, cfg: &mut ModelConfig) -> Result<()> {
        self.set("projection_dim", &mut cfg.projection_dim)?;
        self.set("doc_hidden", &mut cfg.doc_hidden)?;
        self.set("query_hidden", &mut cfg.query_hidden)?;
        self.set("match_channels", &mut cfg.match_channels)?;
        self.set("filters_first", &mut cfg.filters_first)?;
        self.set("filters_second", &mut cfg.filters_second)?;
        self.set("hidden", &mut cfg.hidden)?;
        self.set("attention_pooling", &mut cfg.attention_pooling)?;
        self.set("input_bias", &mut cfg.input_bias)?;
        if let Some(r) = self.take::<usize>("recurrent_projection")? {
            cfg.recurrent_projection = (r > 0).then_some(r);
        }
        Ok(())
    }

    pub fn training(&mut self, cfg: &mut TrainingConfig) -> Result<()> {
        self.set("learning_rate", &mut cfg.learning_rate)?;
        self.set("batch_size", &mut cfg.batch_size)?;
        self.set("epochs", &mut cfg.epochs)?;
        self.set("dropout", &mut cfg.dropout)?;
        self.set("training_seed", &mut cfg.seed)?;
        self.set("subsample", &mut cfg.subsample)?;
        self.set("binary_targets", &mut cfg.binary_targets)?;
        self.set("eval_every", &mut cfg.eval_every)?;
        self.set("keep_best", &mut cfg.keep_best)?;
        Ok(())
    }

    pub fn synthetic(&mut self, spec: &mut SyntheticTaskSpec) -> Result<()> {
        self.set("vocab_size", &mut spec.vocab_size)?;
        self.set("train_queries", &mut spec.queries[0])?;
        self.set("validation_queries", &mut spec.queries[1])?;
        self.set("test_queries", &mut spec.queries[2])?;
        self.set("results_per_query", &mut spec.results_per_query)?;
        self.set("vital_fraction", &mut spec.grade_distribution[0])?;
        self.set("relevant_fraction", &mut spec.grade_distribution[1])?;
        spec.grade_distribution[2] = 1.0 - spec.grade_distribution[0] - spec.grade_distribution[1];
        self.set("embedding_dim", &mut spec.embedding_dim)?;
        self.set("cluster_size", &mut spec.cluster_size)?;
        self.set("mentions", &mut spec.mentions)?;
        Ok(())
    }

    pub fn search(&mut self, space: &mut SearchSpace) -> Result<()> {
        self.set_range("search.projection_dim", &mut space.projection_dim)?;
        self.set_range("search.doc_hidden", &mut space.doc_hidden)?;
        self.set_range("search.query_hidden", &mut space.query_hidden)?;
        self.set_range("search.hidden", &mut space.hidden)?;
        self.set_range("search.match_channels", &mut space.match_channels)?;
        self.set_range("search.filters_first", &mut space.filters_first)?;
        self.set_range("search.filters_second", &mut space.filters_second)?;
        self.set_range("search.epochs", &mut space.epochs)?;
        self.set_range("search.dropout", &mut space.dropout)?;
        self.set_range("search.learning_rate", &mut space.learning_rate)?;
        Ok(())
    }

    pub fn boost(&mut self, cfg: &mut BoostConfig) -> Result<()> {
        self.set("max_trees", &mut cfg.max_trees)?;
        self.set("depth", &mut cfg.depth)?;
        self.set("shrinkage", &mut cfg.shrinkage)?;
        self.set("folds", &mut cfg.folds)?;
        self.set("lambda", &mut cfg.lambda)?;
        Ok(())
    }

    pub fn value<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Errors on the first key no section consumed.
    pub fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((key, (line, _))) => bail!("{}:{line}: unknown key {key:?}", self.source),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use matchtensor::{Architecture, EncoderKind};

    #[test]
    fn parses_and_applies() {
        let mut s = Settings::parse("# comment\nhidden = 12\nlearning_rate=0.01\nsearch.hidden=4..9\n", "c").unwrap();
        let mut m = ModelConfig::small(Architecture::MatchTensor, EncoderKind::Cnn);
        let mut t = TrainingConfig::default();
        s.model(&mut m).unwrap();
        s.training(&mut t).unwrap();
        let mut space = SearchSpace::singleton(&m, &t);
        s.search(&mut space).unwrap();
        s.finish().unwrap();
        assert_eq!(m.hidden, 12);
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(space.hidden, (4, 9));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let s = Settings::parse("hiden=3\n", "c").unwrap();
        assert!(s.finish().unwrap_err().to_string().contains("hiden"));
        assert!(Settings::parse("novalue\n", "c").is_err());
        assert!(Settings::parse("a=1\na=2\n", "c").is_err());
        let mut s = Settings::parse("hidden=lots\n", "c").unwrap();
        let mut m = ModelConfig::small(Architecture::Ssm, EncoderKind::Cnn);
        assert!(s.model(&mut m).unwrap_err().to_string().contains("c:1"));
    }
}
