//! Dense text vectors for side information, prompts and relation labels.
//!
//! An [`Embedder`] wraps an [`EncoderProvider`] with a content-addressed cache
//! so each distinct text is encoded once per `(model_id, pooling)`. In offline
//! mode a cache miss is an error instead of a provider call.
//!
//! # Cache file
//!
//! UTF-8 JSONL. The first line is a header
//! `{"format":"zsre-embedding-cache","version":1,"model_id":..,"pooling":..,"dim":..}`;
//! every following line is `{"key":<hex sha256>,"text":..,"vector":[..]}`.
//! Entries are written sorted by key so a cache file is a pure function of its
//! contents.

mod mock;
pub mod prompts;
mod remote;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{MockEncoder, MockStyle};
pub use prompts::{
    combine_descriptions, normalize_label, render_context_prompt, render_role_prompt, EntitySide,
    LabelNormalization, PairTexts, PromptBundle, PromptStyle, Role,
};
pub use remote::HttpEncoder;

pub const CACHE_FORMAT: &str = "zsre-embedding-cache";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("empty field: {0}")]
    EmptyField(&'static str),
    #[error("encoder service error (status {status:?}): {body}")]
    ServiceError { status: Option<u16>, body: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("encoder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding at position {0}")]
    NonFinite(usize),
    #[error("offline mode: {} text(s) missing from the embedding cache", .missing.len())]
    CacheMiss { missing: Vec<String> },
    #[error("embedding cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

/// Fixed-length vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EmbeddingError::DimensionMismatch { expected: 1, got: 0 });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    ClsToken,
    MeanTokens,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::ClsToken => "cls_token",
            Pooling::MeanTokens => "mean_tokens",
        }
    }
}

/// Anything that turns a batch of texts into raw vectors.
pub trait EncoderProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn pooling(&self) -> Pooling;
    fn dim(&self) -> usize;
    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteHttp,
    #[default]
    DeterministicMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub provider: ProviderKind,
    pub model_id: String,
    pub dim: usize,
    pub pooling: Pooling,
    pub batch_size: usize,
    /// Base URL of the remote encoder; `ZSRE_ENCODER_URL` fills it when unset.
    pub base_url: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub mock_seed: u64,
    pub mock_style: MockStyle,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::DeterministicMock,
            model_id: "bert-base-uncased".into(),
            dim: 768,
            pooling: Pooling::ClsToken,
            batch_size: 32,
            base_url: None,
            timeout_secs: 60,
            max_retries: 3,
            mock_seed: 0,
            mock_style: MockStyle::BagOfWords,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EmbeddingError::Config("dim must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbeddingError::Config("batch_size must be >= 1".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(EmbeddingError::Config("model_id must be non-empty".into()));
        }
        Ok(())
    }

    pub fn build_provider(&self) -> Result<Arc<dyn EncoderProvider>> {
        self.validate()?;
        Ok(match self.provider {
            ProviderKind::DeterministicMock => Arc::new(
                MockEncoder::new(self.dim, self.mock_seed)
                    .with_style(self.mock_style)
                    .with_model_id(&self.model_id)
                    .with_pooling(self.pooling),
            ),
            ProviderKind::RemoteHttp => {
                let url = self
                    .base_url
                    .clone()
                    .ok_or_else(|| EmbeddingError::Config("remote_http provider needs base_url".into()))?;
                Arc::new(HttpEncoder::new(url, self))
            }
        })
    }
}

/// The eight vectors scored for one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbeddings {
    pub combined_description: EmbeddingVector,
    pub head_hypernym: EmbeddingVector,
    pub tail_hypernym: EmbeddingVector,
    pub head_type: EmbeddingVector,
    pub tail_type: EmbeddingVector,
    pub head_role: EmbeddingVector,
    pub tail_role: EmbeddingVector,
    pub context: EmbeddingVector,
}

impl PairEmbeddings {
    pub fn from_slots(slots: [EmbeddingVector; 8]) -> Self {
        let [combined_description, head_hypernym, tail_hypernym, head_type, tail_type, head_role, tail_role, context] =
            slots;
        Self {
            combined_description,
            head_hypernym,
            tail_hypernym,
            head_type,
            tail_type,
            head_role,
            tail_role,
            context,
        }
    }
}

/// Maps dataset label ids to the text that gets embedded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelRenderer {
    pub normalization: LabelNormalization,
    /// Optional id → readable name table, e.g. Wikidata `P69` → `educated at`.
    pub names: BTreeMap<String, String>,
}

impl LabelRenderer {
    pub fn render(&self, label: &str) -> Result<String> {
        let name = self.names.get(label).map(String::as_str).unwrap_or(label);
        normalize_label(name, self.normalization)
    }
}

fn cache_key(model_id: &str, pooling: Pooling, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(pooling.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    model_id: String,
    pooling: Pooling,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    text: String,
    vector: EmbeddingVector,
}

struct CacheEntry {
    text: String,
    vector: EmbeddingVector,
}

pub struct Embedder {
    provider: Arc<dyn EncoderProvider>,
    batch_size: usize,
    offline: bool,
    cache: RwLock<HashMap<String, CacheEntry>>,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EncoderProvider>, batch_size: usize) -> Self {
        Self {
            provider,
            batch_size: batch_size.max(1),
            offline: false,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn is_offline(&self) -> bool {
        self.offline
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("embedding cache poisoned").len()
    }

    fn key(&self, text: &str) -> String {
        cache_key(self.provider.model_id(), self.provider.pooling(), text)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.cache.read().expect("embedding cache poisoned").contains_key(&self.key(text))
    }

    /// Texts (deduplicated, first-occurrence order) not yet cached.
    pub fn missing<S: AsRef<str>>(&self, texts: &[S]) -> Vec<String> {
        let cache = self.cache.read().expect("embedding cache poisoned");
        let mut seen = HashSet::new();
        texts
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| !cache.contains_key(&self.key(t)) && seen.insert(*t))
            .map(str::to_string)
            .collect()
    }

    /// One vector per input text, order-preserving.
    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.as_ref().trim().is_empty()) {
            return Err(EmbeddingError::EmptyField("text"));
        }
        let missing = self.missing(texts);
        if !missing.is_empty() {
            if self.offline {
                return Err(EmbeddingError::CacheMiss { missing });
            }
            self.encode_and_store(&missing)?;
        }
        let cache = self.cache.read().expect("embedding cache poisoned");
        Ok(texts
            .iter()
            .map(|t| cache[&self.key(t.as_ref())].vector.clone())
            .collect())
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_texts(&[text])?.remove(0))
    }

    fn encode_and_store(&self, texts: &[String]) -> Result<()> {
        let dim = self.provider.dim();
        for chunk in texts.chunks(self.batch_size) {
            let raw = self.provider.encode(chunk)?;
            if raw.len() != chunk.len() {
                return Err(EmbeddingError::CountMismatch {
                    expected: chunk.len(),
                    got: raw.len(),
                });
            }
            let mut vectors = Vec::with_capacity(raw.len());
            for values in raw {
                if values.len() != dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: dim,
                        got: values.len(),
                    });
                }
                vectors.push(EmbeddingVector::new(values)?);
            }
            let mut cache = self.cache.write().expect("embedding cache poisoned");
            for (text, vector) in chunk.iter().zip(vectors) {
                cache.insert(
                    self.key(text),
                    CacheEntry {
                        text: text.clone(),
                        vector,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn embed_relation_label(&self, label: &str, renderer: &LabelRenderer) -> Result<EmbeddingVector> {
        let text = renderer.render(label)?;
        self.embed_text(&text)
    }

    pub fn embed_pair(&self, texts: &PairTexts) -> Result<PairEmbeddings> {
        let vectors = self.embed_texts(&texts.as_slots())?;
        let slots: [EmbeddingVector; 8] = vectors
            .try_into()
            .expect("embed_texts returns one vector per input");
        Ok(PairEmbeddings::from_slots(slots))
    }

    /// Loads entries from a cache file; a missing file is not an error.
    pub fn load_cache(&self, path: &Path) -> Result<usize> {
        if !path.exists() {
            return Ok(0);
        }
        let cache_err = |reason: String| EmbeddingError::Cache {
            path: path.display().to_string(),
            reason,
        };
        let file = File::open(path).map_err(|e| cache_err(e.to_string()))?;
        let mut lines = BufReader::new(file).lines();
        let Some(first) = lines.next() else {
            return Ok(0);
        };
        let header: CacheHeader =
            serde_json::from_str(&first.map_err(|e| cache_err(e.to_string()))?).map_err(|e| cache_err(e.to_string()))?;
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(cache_err(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.model_id != self.provider.model_id()
            || header.pooling != self.provider.pooling()
            || header.dim != self.provider.dim()
        {
            return Err(cache_err(format!(
                "cache built for {}/{}/{} but encoder is {}/{}/{}",
                header.model_id,
                header.pooling.as_str(),
                header.dim,
                self.provider.model_id(),
                self.provider.pooling().as_str(),
                self.provider.dim()
            )));
        }
        let mut loaded = 0;
        let mut cache = self.cache.write().expect("embedding cache poisoned");
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| cache_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine =
                serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", n + 2)))?;
            if entry.vector.dim() != header.dim {
                return Err(cache_err(format!("line {}: vector has dim {}", n + 2, entry.vector.dim())));
            }
            if entry.key != self.key(&entry.text) {
                return Err(cache_err(format!("line {}: key does not match text", n + 2)));
            }
            cache.insert(
                entry.key,
                CacheEntry {
                    text: entry.text,
                    vector: entry.vector,
                },
            );
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let cache_err = |reason: String| EmbeddingError::Cache {
            path: path.display().to_string(),
            reason,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        let file = File::create(path).map_err(|e| cache_err(e.to_string()))?;
        let mut out = BufWriter::new(file);
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            model_id: self.provider.model_id().into(),
            pooling: self.provider.pooling(),
            dim: self.provider.dim(),
        };
        let cache = self.cache.read().expect("embedding cache poisoned");
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        let write = |out: &mut BufWriter<File>, line: String| writeln!(out, "{line}").map_err(|e| cache_err(e.to_string()));
        write(&mut out, serde_json::to_string(&header).expect("header serializes"))?;
        for key in keys {
            let entry = &cache[key];
            let line = CacheLine {
                key: key.clone(),
                text: entry.text.clone(),
                vector: entry.vector.clone(),
            };
            write(&mut out, serde_json::to_string(&line).expect("cache line serializes"))?;
        }
        out.flush().map_err(|e| cache_err(e.to_string()))
    }
}
