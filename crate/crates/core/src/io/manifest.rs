use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::TripletRecord;
use super::experiment::{bm25_scores, prepare_examples, MetricsSnapshot};
use crate::baselines::Bm25Params;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, RankingModel};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, Vocabulary};
use crate::train::{score_examples, TrainingConfig};

pub const MANIFEST_MAGIC: &str = "matchtensor-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const EMBEDDING_TENSOR: &str = "embedding_table";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Neural { config: ModelConfig, bigrams: bool },
    Bm25 { params: Bm25Params },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    dataset_fingerprint: String,
    model: ModelSpec,
    training: Option<TrainingConfig>,
    metrics: BTreeMap<String, MetricsSnapshot>,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A saved run: configuration, seeds, data fingerprint, metrics and the
/// parameters needed to score again.
///
/// On disk: one text line `matchtensor-manifest v1`, one line of JSON header
/// listing every tensor with its shape and payload offset, then the
/// little-endian f64 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: u32,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_fingerprint: String,
    pub model: ModelSpec,
    pub training: Option<TrainingConfig>,
    /// Keyed by split name.
    pub metrics: BTreeMap<String, MetricsSnapshot>,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

/// A reloaded scorer.
#[derive(Debug, Clone)]
pub enum Scorer {
    Neural { vocab: Vocabulary, model: RankingModel },
    Bm25 { params: Bm25Params },
}

impl Scorer {
    /// Scores every record. BM25 statistics come from the records given.
    pub fn score_records(&self, records: &[TripletRecord]) -> Result<Vec<f64>> {
        match self {
            Scorer::Neural { vocab, model } => score_examples(model, &prepare_examples(records, vocab)),
            Scorer::Bm25 { params } => bm25_scores(records, *params),
        }
    }
}

impl RunManifest {
    pub fn for_model(
        model: &RankingModel,
        vocab: &Vocabulary,
        training: Option<TrainingConfig>,
        seeds: BTreeMap<String, u64>,
        dataset_fingerprint: impl Into<String>,
    ) -> Self {
        let mut tensors = vec![(EMBEDDING_TENSOR.to_string(), model.table().matrix().clone())];
        tensors.extend(model.store().iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())));
        Self {
            version: MANIFEST_VERSION,
            seeds,
            dataset_fingerprint: dataset_fingerprint.into(),
            model: ModelSpec::Neural { config: model.config().clone(), bigrams: vocab.bigrams_enabled() },
            training,
            metrics: BTreeMap::new(),
            vocabulary: vocab.regular_tokens().to_vec(),
            tensors,
        }
    }

    pub fn for_bm25(params: Bm25Params, dataset_fingerprint: impl Into<String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seeds: BTreeMap::new(),
            dataset_fingerprint: dataset_fingerprint.into(),
            model: ModelSpec::Bm25 { params },
            training: None,
            metrics: BTreeMap::new(),
            vocabulary: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// SHA-256 of the model and training configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.model, &self.training)).expect("configs serialise");
        hex::encode(Sha256::digest(json))
    }

    /// Rebuilds the scorer this manifest describes.
    pub fn scorer(&self) -> Result<Scorer> {
        match &self.model {
            ModelSpec::Bm25 { params } => Ok(Scorer::Bm25 { params: Bm25Params::new(params.k1, params.b)? }),
            ModelSpec::Neural { config, bigrams } => {
                let vocab = Vocabulary::from_tokens(self.vocabulary.iter().cloned())?.with_bigrams(*bigrams);
                let mut rest = self.tensors.iter();
                let table = match rest.next() {
                    Some((name, t)) if name == EMBEDDING_TENSOR => EmbeddingTable::new(t.clone())?,
                    _ => return Err(Error::Manifest(format!("first tensor must be {EMBEDDING_TENSOR:?}"))),
                };
                if table.rows() != vocab.len() {
                    return Err(Error::Manifest(format!(
                        "embedding table has {} rows for a vocabulary of {}",
                        table.rows(),
                        vocab.len()
                    )));
                }
                let model = RankingModel::from_parameters(config.clone(), Arc::new(table), rest.cloned())?;
                Ok(Scorer::Neural { vocab, model })
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() });
            offset += t.len();
        }
        let header = Header {
            version: self.version,
            config_hash: self.config_hash(),
            seeds: self.seeds.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            model: self.model.clone(),
            training: self.training.clone(),
            metrics: self.metrics.clone(),
            vocabulary: self.vocabulary.clone(),
            tensors: entries,
        };
        let mut out = format!("{MANIFEST_MAGIC} v{}\n", self.version).into_bytes();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        out.reserve(offset * 8);
        for (_, t) in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Manifest(m.to_string());
        let first = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let magic = std::str::from_utf8(&bytes[..first]).map_err(|_| bad("header is not UTF-8"))?;
        let version = magic
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("not a manifest file"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {version}")));
        }
        let rest = &bytes[first + 1..];
        let second = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing JSON header"))?;
        let header: Header = serde_json::from_slice(&rest[..second])?;
        let payload = &rest[second + 1..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len()).ok_or_else(|| {
                Error::Manifest(format!("tensor {:?} runs past the payload", e.name))
            })?;
            let t = Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())
                .map_err(|err| Error::Manifest(format!("tensor {:?}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        let manifest = Self {
            version: header.version,
            seeds: header.seeds,
            dataset_fingerprint: header.dataset_fingerprint,
            model: header.model,
            training: header.training,
            metrics: header.metrics,
            vocabulary: header.vocabulary,
            tensors,
        };
        if manifest.config_hash() != header.config_hash {
            return Err(bad("config hash does not match the stored configuration"));
        }
        Ok(manifest)
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
