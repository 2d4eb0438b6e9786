//! Entity side information: LLM-generated descriptions and hypernyms,
//! persisted in an append-only JSONL store.
//!
//! This is the only nondeterministic stage of the pipeline. Every later stage
//! reads the stored strings, so once the store is populated a run can be
//! replayed offline.

mod client;
mod template;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use client::{ChatClient, ChatError, ChatMessage, ChatRequest, HttpChatClient, OfflineChatClient, API_KEY_ENV};
pub use template::{PromptSet, PromptTemplate, DEFAULT_DESCRIPTION_TEMPLATE, DEFAULT_HYPERNYM_TEMPLATE};

use crate::corpus::{Dataset, Document};
use crate::embedding::EntitySide;
use crate::http::RetryPolicy;

pub const MAX_HYPERNYM_WORDS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SideInfoError {
    #[error(transparent)]
    Service(#[from] ChatError),
    #[error("empty completion for {0}")]
    EmptyCompletion(String),
    #[error("hypernym '{text}' has {words} words (limit {MAX_HYPERNYM_WORDS})")]
    FormatError { text: String, words: usize },
    #[error("entity {index} not found in document {doc_id}")]
    UnknownEntity { doc_id: String, index: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid record for ({doc_id}, {entity_index}): {reason}")]
    InvalidRecord {
        doc_id: String,
        entity_index: usize,
        reason: String,
    },
    #[error("duplicate record for ({doc_id}, {entity_index})")]
    DuplicateRecord { doc_id: String, entity_index: usize },
    #[error("side-info store {path}: {reason}")]
    Store { path: String, reason: String },
    #[error("prompt template: {0}")]
    Template(String),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("side-info build stopped after {completed} new record(s): {source}")]
    Build {
        completed: usize,
        #[source]
        source: Box<SideInfoError>,
    },
}

pub type Result<T, E = SideInfoError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub parallelism: usize,
    /// Chat service base URL; `/v1/chat/completions` is appended.
    pub base_url: String,
    pub max_description_chars: usize,
    /// Sentences kept on each side of a mention; `None` keeps the whole document.
    pub context_window: Option<usize>,
    /// Whitespace-token budget for the document excerpt.
    pub max_context_tokens: usize,
    /// Directory overriding the bundled prompt templates.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_id: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_tokens: 256,
            request_timeout_secs: 60,
            max_retries: 3,
            parallelism: 4,
            base_url: "https://api.openai.com".into(),
            max_description_chars: 512,
            context_window: None,
            max_context_tokens: 3000,
            prompt_dir: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(SideInfoError::Config("temperature must be >= 0".into()));
        }
        if self.parallelism == 0 {
            return Err(SideInfoError::Config("parallelism must be >= 1".into()));
        }
        if self.max_description_chars == 0 {
            return Err(SideInfoError::Config("max_description_chars must be > 0".into()));
        }
        Ok(())
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        match &self.prompt_dir {
            Some(dir) => PromptSet::from_dir(dir),
            None => Ok(PromptSet::default()),
        }
    }

    pub fn http_client(&self) -> HttpChatClient {
        HttpChatClient::from_env(
            &self.base_url,
            Duration::from_secs(self.request_timeout_secs),
            RetryPolicy {
                max_retries: self.max_retries,
                ..RetryPolicy::default()
            },
        )
    }

    fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model_id.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfoRecord {
    pub doc_id: String,
    pub entity_index: usize,
    pub mention_surface: String,
    pub entity_type: String,
    pub description: String,
    pub hypernym: String,
    pub generator_model: String,
    pub prompt_version: String,
    pub created_at: DateTime<Utc>,
}

impl SideInfoRecord {
    pub fn side(&self) -> EntitySide<'_> {
        EntitySide {
            entity_type: &self.entity_type,
            description: &self.description,
            hypernym: &self.hypernym,
        }
    }

    pub fn validate(&self, max_description_chars: usize) -> Result<()> {
        let invalid = |reason: String| SideInfoError::InvalidRecord {
            doc_id: self.doc_id.clone(),
            entity_index: self.entity_index,
            reason,
        };
        if self.description.trim().is_empty() {
            return Err(invalid("empty description".into()));
        }
        let chars = self.description.chars().count();
        if chars > max_description_chars {
            return Err(invalid(format!("description has {chars} chars (limit {max_description_chars})")));
        }
        let words = self.hypernym.split_whitespace().count();
        if words == 0 || words > MAX_HYPERNYM_WORDS {
            return Err(invalid(format!("hypernym has {words} words")));
        }
        if self.hypernym.ends_with(['.', '!', '?']) {
            return Err(invalid("hypernym ends with sentence punctuation".into()));
        }
        if self.entity_type.trim().is_empty() {
            return Err(invalid("empty entity type".into()));
        }
        Ok(())
    }
}

/// Map of `(doc_id, entity_index)` to records, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct SideInfoStore {
    records: BTreeMap<(String, usize), SideInfoRecord>,
    path: Option<PathBuf>,
}

impl SideInfoStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first append) a JSONL-backed store.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self {
            records: BTreeMap::new(),
            path: Some(path.to_path_buf()),
        };
        if !path.exists() {
            return Ok(store);
        }
        let store_err = |reason: String| SideInfoError::Store {
            path: path.display().to_string(),
            reason,
        };
        let file = File::open(path).map_err(|e| store_err(e.to_string()))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| store_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SideInfoRecord =
                serde_json::from_str(&line).map_err(|e| store_err(format!("line {}: {e}", n + 1)))?;
            store.insert_memory(record)?;
        }
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, doc_id: &str, entity_index: usize) -> Option<&SideInfoRecord> {
        self.records.get(&(doc_id.to_string(), entity_index))
    }

    pub fn contains(&self, doc_id: &str, entity_index: usize) -> bool {
        self.get(doc_id, entity_index).is_some()
    }

    pub fn records(&self) -> impl Iterator<Item = &SideInfoRecord> {
        self.records.values()
    }

    fn insert_memory(&mut self, record: SideInfoRecord) -> Result<()> {
        let key = (record.doc_id.clone(), record.entity_index);
        if self.records.contains_key(&key) {
            return Err(SideInfoError::DuplicateRecord {
                doc_id: key.0,
                entity_index: key.1,
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    /// Adds a record, appending and flushing it to the backing file first.
    pub fn insert(&mut self, record: SideInfoRecord) -> Result<()> {
        if self.contains(&record.doc_id, record.entity_index) {
            return Err(SideInfoError::DuplicateRecord {
                doc_id: record.doc_id,
                entity_index: record.entity_index,
            });
        }
        if let Some(path) = &self.path {
            let store_err = |reason: String| SideInfoError::Store {
                path: path.display().to_string(),
                reason,
            };
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| store_err(e.to_string()))?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| store_err(e.to_string()))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| store_err(e.to_string()))?;
        }
        self.insert_memory(record)
    }

    /// Keys of `dataset` entities without a record.
    pub fn missing(&self, dataset: &Dataset) -> Vec<(String, usize)> {
        dataset
            .documents
            .iter()
            .flat_map(|d| d.entities.iter().map(move |e| (d.doc_id.clone(), e.entity_index)))
            .filter(|(d, i)| !self.contains(d, *i))
            .collect()
    }
}

/// Sentence indices fed to the description prompt for one entity.
fn context_sentences(doc: &Document, entity_index: usize, cfg: &GenerationConfig) -> Vec<usize> {
    let anchors: Vec<usize> = doc.entities[entity_index].mentions.iter().map(|m| m.sent_index).collect();
    let distance = |s: usize| anchors.iter().map(|a| a.abs_diff(s)).min().unwrap_or(usize::MAX);
    let mut candidates: Vec<usize> = (0..doc.sentences.len())
        .filter(|&s| cfg.context_window.is_none_or(|w| distance(s) <= w))
        .collect();
    let total: usize = candidates.iter().map(|&s| doc.sentences[s].len()).sum();
    if total > cfg.max_context_tokens {
        candidates.sort_by_key(|&s| (distance(s), s));
        let mut budget = cfg.max_context_tokens;
        let mut kept = Vec::new();
        for s in candidates {
            let len = doc.sentences[s].len();
            // Mention sentences are always kept.
            if len <= budget || distance(s) == 0 {
                budget = budget.saturating_sub(len);
                kept.push(s);
            }
        }
        candidates = kept;
        candidates.sort_unstable();
    }
    candidates
}

pub fn document_excerpt(doc: &Document, entity_index: usize, cfg: &GenerationConfig) -> String {
    context_sentences(doc, entity_index, cfg)
        .into_iter()
        .map(|s| doc.sentences[s].join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_quotes(s: &str) -> &str {
    s.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”')).trim()
}

/// Trims and caps a description, preferring to cut at a sentence end.
fn clean_description(raw: &str, max_chars: usize) -> String {
    let text = strip_quotes(raw);
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let cut: String = text.chars().take(max_chars).collect();
    match cut.rfind(". ") {
        Some(pos) if pos > 0 => cut[..=pos].to_string(),
        _ => cut.trim_end().to_string(),
    }
}

/// Lowercases and strips quoting, a leading "X is a", articles and trailing punctuation.
pub fn normalize_hypernym(raw: &str, mention_surface: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let mut text = strip_quotes(line).to_lowercase();
    for prefix in ["hypernym:", "category:"] {
        if let Some(rest) = text.strip_prefix(prefix) {
            text = rest.trim().to_string();
        }
    }
    let surface = mention_surface.trim().to_lowercase();
    if !surface.is_empty() {
        for joiner in [" is ", " was ", " are "] {
            if let Some(rest) = text.strip_prefix(&format!("{surface}{joiner}")) {
                text = rest.to_string();
            }
        }
    }
    let text = strip_quotes(&text).trim_end_matches(['.', ',', ';', ':', '!', '?']);
    let mut words: Vec<&str> = text.split_whitespace().collect();
    if matches!(words.first(), Some(&("a" | "an" | "the"))) && words.len() > 1 {
        words.remove(0);
    }
    words.join(" ")
}

pub fn generate_description(
    doc: &Document,
    entity_index: usize,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
    prompts: &PromptSet,
) -> Result<String> {
    let entity = doc.entities.get(entity_index).ok_or_else(|| SideInfoError::UnknownEntity {
        doc_id: doc.doc_id.clone(),
        index: entity_index,
    })?;
    let excerpt = document_excerpt(doc, entity_index, cfg);
    let messages = prompts.description.render(&[
        ("document", &excerpt),
        ("mention", entity.canonical_surface()),
        ("entity_type", &entity.entity_type),
    ]);
    let raw = client.complete(&cfg.request(messages))?;
    let description = clean_description(&raw, cfg.max_description_chars);
    if description.is_empty() {
        return Err(SideInfoError::EmptyCompletion(format!(
            "description of entity {entity_index} in {}",
            doc.doc_id
        )));
    }
    Ok(description)
}

pub fn generate_hypernym(
    mention_surface: &str,
    entity_type: &str,
    description: &str,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
    prompts: &PromptSet,
) -> Result<String> {
    for (value, name) in [
        (mention_surface, "mention_surface"),
        (entity_type, "entity_type"),
        (description, "description"),
    ] {
        if value.trim().is_empty() {
            return Err(SideInfoError::EmptyInput(name));
        }
    }
    let messages = prompts.hypernym.render(&[
        ("mention", mention_surface),
        ("entity_type", entity_type),
        ("description", description),
    ]);
    let raw = client.complete(&cfg.request(messages))?;
    let hypernym = normalize_hypernym(&raw, mention_surface);
    if hypernym.is_empty() {
        return Err(SideInfoError::EmptyCompletion(format!("hypernym of '{mention_surface}'")));
    }
    let words = hypernym.split_whitespace().count();
    if words > MAX_HYPERNYM_WORDS {
        return Err(SideInfoError::FormatError { text: hypernym, words });
    }
    Ok(hypernym)
}

/// Description then hypernym for one entity.
pub fn generate_record(
    doc: &Document,
    entity_index: usize,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
    prompts: &PromptSet,
) -> Result<SideInfoRecord> {
    let description = generate_description(doc, entity_index, client, cfg, prompts)?;
    let entity = &doc.entities[entity_index];
    let hypernym = generate_hypernym(
        entity.canonical_surface(),
        &entity.entity_type,
        &description,
        client,
        cfg,
        prompts,
    )?;
    let record = SideInfoRecord {
        doc_id: doc.doc_id.clone(),
        entity_index,
        mention_surface: entity.canonical_surface().to_string(),
        entity_type: entity.entity_type.clone(),
        description,
        hypernym,
        generator_model: cfg.model_id.clone(),
        prompt_version: prompts.version(),
        created_at: Utc::now(),
    };
    record.validate(cfg.max_description_chars)?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub generated: usize,
    pub cached: usize,
}

/// Fills `store` with a record for every entity of `dataset`.
///
/// Existing records are reused. Up to `cfg.parallelism` entities are
/// generated concurrently; finished records are appended one at a time by the
/// calling thread. After the first failure no new work starts, in-flight work
/// is still persisted, and the error reports how many records were added.
pub fn build_side_info(
    dataset: &Dataset,
    client: &dyn ChatClient,
    cfg: &GenerationConfig,
    prompts: &PromptSet,
    store: &mut SideInfoStore,
) -> Result<BuildSummary> {
    cfg.validate()?;
    let total: usize = dataset.documents.iter().map(|d| d.entities.len()).sum();
    let jobs: Vec<(&Document, usize)> = dataset
        .documents
        .iter()
        .flat_map(|d| d.entities.iter().map(move |e| (d, e.entity_index)))
        .filter(|(d, i)| !store.contains(&d.doc_id, *i))
        .collect();
    let cached = total - jobs.len();
    if jobs.is_empty() {
        return Ok(BuildSummary { generated: 0, cached });
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut completed = 0;
    let mut first_error: Option<SideInfoError> = None;

    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Result<SideInfoRecord>>();
        for _ in 0..cfg.parallelism.min(jobs.len()) {
            let tx = tx.clone();
            let (jobs, next, stop) = (&jobs, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(doc, entity_index)) = jobs.get(i) else {
                    break;
                };
                let outcome = generate_record(doc, entity_index, client, cfg, prompts);
                if outcome.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            let persisted = outcome.and_then(|record| store.insert(record));
            match persisted {
                Ok(()) => completed += 1,
                Err(err) => {
                    stop.store(true, Ordering::SeqCst);
                    first_error.get_or_insert(err);
                }
            }
        }
    });

    match first_error {
        None => Ok(BuildSummary {
            generated: completed,
            cached,
        }),
        Some(err) => Err(SideInfoError::Build {
            completed,
            source: Box::new(err),
        }),
    }
}
