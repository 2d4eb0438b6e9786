//! Document-level RE corpora: data model, loaders for the DocRED and MEN
//! JSON layouts, entity-pair enumeration and sentence-gap computation.
//!
//! Both on-disk layouts are mapped onto the same [`Document`] model. Fields
//! the loader does not understand are kept in [`Document::metadata`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {reason}")]
    ParseError {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("schema error in document {doc_id}, field {field}: {reason}")]
    SchemaError {
        doc_id: String,
        field: String,
        reason: String,
    },
    #[error("entity index {index} out of range for document {doc_id} with {len} entities")]
    IndexError {
        doc_id: String,
        index: usize,
        len: usize,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub sent_index: usize,
    /// Half-open token range within the sentence.
    pub token_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_index: usize,
    pub mentions: Vec<Mention>,
    pub entity_type: String,
}

impl Entity {
    /// Surface of the first mention, used as the canonical name of the cluster.
    pub fn canonical_surface(&self) -> &str {
        &self.mentions[0].surface
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationInstance {
    pub head_index: usize,
    pub tail_index: usize,
    pub relation_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub gold_relations: Vec<RelationInstance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

impl Document {
    pub fn entity(&self, index: usize) -> Result<&Entity> {
        self.entities.get(index).ok_or_else(|| CorpusError::IndexError {
            doc_id: self.doc_id.clone(),
            index,
            len: self.entities.len(),
        })
    }

    /// Sentences joined with single spaces, one sentence per line.
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self, check_surface: bool) -> Result<()> {
        let schema = |field: &str, reason: String| CorpusError::SchemaError {
            doc_id: self.doc_id.clone(),
            field: field.to_string(),
            reason,
        };
        if self.doc_id.is_empty() {
            return Err(schema("doc_id", "empty document id".into()));
        }
        for (i, entity) in self.entities.iter().enumerate() {
            if entity.entity_index != i {
                return Err(schema(
                    "vertexSet",
                    format!("entity at position {i} carries index {}", entity.entity_index),
                ));
            }
            if entity.mentions.is_empty() {
                return Err(schema("vertexSet", format!("entity {i} has no mentions")));
            }
            if entity.entity_type.trim().is_empty() {
                return Err(schema("type", format!("entity {i} has an empty type")));
            }
            for m in &entity.mentions {
                let Some(sentence) = self.sentences.get(m.sent_index) else {
                    return Err(schema(
                        "sent_id",
                        format!(
                            "entity {i} mention '{}' references sentence {} but document has {}",
                            m.surface,
                            m.sent_index,
                            self.sentences.len()
                        ),
                    ));
                };
                let (start, end) = m.token_span;
                if start >= end || end > sentence.len() {
                    return Err(schema(
                        "pos",
                        format!(
                            "entity {i} mention '{}' span [{start}, {end}) invalid for sentence of {} tokens",
                            m.surface,
                            sentence.len()
                        ),
                    ));
                }
                if check_surface {
                    let span_text: String = sentence[start..end].concat();
                    if squash_whitespace(&span_text) != squash_whitespace(&m.surface) {
                        return Err(schema(
                            "name",
                            format!(
                                "entity {i} mention '{}' does not match span text '{}'",
                                m.surface,
                                sentence[start..end].join(" ")
                            ),
                        ));
                    }
                }
            }
        }
        for rel in &self.gold_relations {
            let n = self.entities.len();
            if rel.head_index >= n || rel.tail_index >= n {
                return Err(schema(
                    "labels",
                    format!(
                        "relation ({}, {}, {}) references entity outside [0, {n})",
                        rel.head_index, rel.tail_index, rel.relation_label
                    ),
                ));
            }
            if rel.head_index == rel.tail_index {
                return Err(schema(
                    "labels",
                    format!("relation {} has identical head and tail {}", rel.relation_label, rel.head_index),
                ));
            }
            if rel.relation_label.is_empty() {
                return Err(schema("labels", "empty relation label".into()));
            }
        }
        Ok(())
    }
}

fn squash_whitespace(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub documents: Vec<Document>,
    /// Sorted; the order is the canonical inventory order for label sampling.
    pub label_inventory: BTreeSet<String>,
}

impl Dataset {
    /// Builds a dataset from documents, deriving the label inventory from gold relations.
    pub fn from_documents(name: impl Into<String>, documents: Vec<Document>) -> Self {
        let label_inventory = documents
            .iter()
            .flat_map(|d| d.gold_relations.iter().map(|r| r.relation_label.clone()))
            .collect();
        Self {
            name: name.into(),
            documents,
            label_inventory,
        }
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn labels(&self) -> Vec<String> {
        self.label_inventory.iter().cloned().collect()
    }

    pub fn entity_count(&self) -> usize {
        self.documents.iter().map(|d| d.entities.len()).sum()
    }

    pub fn relation_count(&self) -> usize {
        self.documents.iter().map(|d| d.gold_relations.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    DocredJson,
    MenJson,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "docred_json" | "docred" => Ok(Self::DocredJson),
            "men_json" | "men" => Ok(Self::MenJson),
            other => Err(format!("unknown dataset format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Skip invalid documents instead of aborting.
    pub lenient: bool,
    /// Require mention surfaces to match their token spans.
    pub check_surface: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            lenient: false,
            check_surface: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedDocument {
    pub position: usize,
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub skipped: Vec<SkippedDocument>,
}

/// Loads a dataset, aborting on the first invalid document.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    load_dataset_with(path, format, LoadOptions::default()).map(|o| o.dataset)
}

pub fn load_dataset_with(path: &Path, format: DatasetFormat, opts: LoadOptions) -> Result<LoadOutcome> {
    if !path.exists() {
        return Err(CorpusError::FileNotFound(path.display().to_string()));
    }
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_dataset(&raw, &name, format, opts)
}

/// Parses dataset JSON text. `name` becomes the dataset name.
pub fn parse_dataset(raw: &str, name: &str, format: DatasetFormat, opts: LoadOptions) -> Result<LoadOutcome> {
    let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::ParseError {
        line: e.line(),
        column: e.column(),
        reason: e.to_string(),
    })?;
    let Value::Array(records) = value else {
        return Err(CorpusError::ParseError {
            line: 1,
            column: 1,
            reason: "top-level value must be an array of documents".into(),
        });
    };

    let mut documents = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    let mut seen_ids = HashSet::new();
    for (position, record) in records.into_iter().enumerate() {
        let parsed = match format {
            DatasetFormat::DocredJson => docred_document(record, position),
            DatasetFormat::MenJson => men_document(record, position),
        }
        .and_then(|doc| {
            doc.validate(opts.check_surface)?;
            if !seen_ids.insert(doc.doc_id.clone()) {
                return Err(CorpusError::SchemaError {
                    doc_id: doc.doc_id.clone(),
                    field: "doc_id".into(),
                    reason: "duplicate document id".into(),
                });
            }
            Ok(doc)
        });
        match parsed {
            Ok(doc) => documents.push(doc),
            Err(err) if opts.lenient => {
                let doc_id = match &err {
                    CorpusError::SchemaError { doc_id, .. } | CorpusError::IndexError { doc_id, .. } => doc_id.clone(),
                    _ => format!("#{position}"),
                };
                log::warn!("skipping document {doc_id} at position {position}: {err}");
                skipped.push(SkippedDocument {
                    position,
                    doc_id,
                    reason: err.to_string(),
                });
            }
            Err(err) => return Err(err),
        }
    }
    Ok(LoadOutcome {
        dataset: Dataset::from_documents(name, documents),
        skipped,
    })
}

// Raw record shapes. Everything not listed here lands in metadata.

#[derive(Deserialize)]
struct DocredMention {
    name: String,
    #[serde(rename = "type")]
    entity_type: String,
    sent_id: usize,
    pos: Vec<usize>,
}

#[derive(Deserialize)]
struct DocredLabel {
    h: usize,
    t: usize,
    r: String,
}

#[derive(Deserialize)]
struct MenMention {
    name: String,
    sent_id: usize,
    pos: Vec<usize>,
}

#[derive(Deserialize)]
struct MenEntity {
    #[serde(rename = "type")]
    entity_type: String,
    mentions: Vec<MenMention>,
}

#[derive(Deserialize)]
struct MenRelation {
    head: usize,
    tail: usize,
    relation: String,
}

fn take_field<T: serde::de::DeserializeOwned>(
    obj: &mut Map<String, Value>,
    key: &str,
    doc_id: &str,
) -> Result<Option<T>> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| CorpusError::SchemaError {
            doc_id: doc_id.to_string(),
            field: key.to_string(),
            reason: e.to_string(),
        }),
    }
}

fn require<T>(value: Option<T>, key: &str, doc_id: &str) -> Result<T> {
    value.ok_or_else(|| CorpusError::SchemaError {
        doc_id: doc_id.to_string(),
        field: key.to_string(),
        reason: "missing required field".into(),
    })
}

fn into_object(record: Value, position: usize) -> Result<Map<String, Value>> {
    match record {
        Value::Object(map) => Ok(map),
        _ => Err(CorpusError::SchemaError {
            doc_id: format!("#{position}"),
            field: "<record>".into(),
            reason: "document record must be a JSON object".into(),
        }),
    }
}

/// `doc_id`/`id` when present, otherwise the title, otherwise the position.
fn resolve_doc_id(obj: &Map<String, Value>, position: usize) -> String {
    for key in ["doc_id", "id"] {
        match obj.get(key) {
            Some(Value::String(s)) if !s.is_empty() => return s.clone(),
            Some(Value::Number(n)) => return n.to_string(),
            _ => {}
        }
    }
    match obj.get("title") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => format!("doc-{position}"),
    }
}

fn span(pos: &[usize], doc_id: &str) -> Result<(usize, usize)> {
    match pos {
        [start, end] => Ok((*start, *end)),
        _ => Err(CorpusError::SchemaError {
            doc_id: doc_id.to_string(),
            field: "pos".into(),
            reason: format!("expected [start, end], got {pos:?}"),
        }),
    }
}

fn docred_document(record: Value, position: usize) -> Result<Document> {
    let mut obj = into_object(record, position)?;
    let doc_id = resolve_doc_id(&obj, position);
    obj.remove("doc_id");
    obj.remove("id");
    let title: String = take_field(&mut obj, "title", &doc_id)?.unwrap_or_default();
    let sentences: Vec<Vec<String>> = require(take_field(&mut obj, "sents", &doc_id)?, "sents", &doc_id)?;
    let vertex_set: Vec<Vec<DocredMention>> =
        require(take_field(&mut obj, "vertexSet", &doc_id)?, "vertexSet", &doc_id)?;
    let labels: Vec<DocredLabel> = take_field(&mut obj, "labels", &doc_id)?.unwrap_or_default();

    let mut entities = Vec::with_capacity(vertex_set.len());
    for (entity_index, cluster) in vertex_set.into_iter().enumerate() {
        // DocRED stores the type per mention; the first mention's type wins.
        let entity_type = cluster.first().map(|m| m.entity_type.clone()).unwrap_or_default();
        let mentions = cluster
            .into_iter()
            .map(|m| {
                Ok(Mention {
                    token_span: span(&m.pos, &doc_id)?,
                    surface: m.name,
                    sent_index: m.sent_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entities.push(Entity {
            entity_index,
            mentions,
            entity_type,
        });
    }
    let gold_relations = labels
        .into_iter()
        .map(|l| RelationInstance {
            head_index: l.h,
            tail_index: l.t,
            relation_label: l.r,
        })
        .collect();

    Ok(Document {
        doc_id,
        title,
        sentences,
        entities,
        gold_relations,
        metadata: obj.into_iter().collect(),
    })
}

fn men_document(record: Value, position: usize) -> Result<Document> {
    let mut obj = into_object(record, position)?;
    let doc_id = resolve_doc_id(&obj, position);
    obj.remove("doc_id");
    obj.remove("id");
    let title: String = take_field(&mut obj, "title", &doc_id)?.unwrap_or_default();
    let sentences: Vec<Vec<String>> =
        require(take_field(&mut obj, "sentences", &doc_id)?, "sentences", &doc_id)?;
    let raw_entities: Vec<MenEntity> = require(take_field(&mut obj, "entities", &doc_id)?, "entities", &doc_id)?;
    let relations: Vec<MenRelation> = take_field(&mut obj, "relations", &doc_id)?.unwrap_or_default();

    let mut entities = Vec::with_capacity(raw_entities.len());
    for (entity_index, e) in raw_entities.into_iter().enumerate() {
        let mentions = e
            .mentions
            .into_iter()
            .map(|m| {
                Ok(Mention {
                    token_span: span(&m.pos, &doc_id)?,
                    surface: m.name,
                    sent_index: m.sent_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entities.push(Entity {
            entity_index,
            mentions,
            entity_type: e.entity_type,
        });
    }
    let gold_relations = relations
        .into_iter()
        .map(|r| RelationInstance {
            head_index: r.head,
            tail_index: r.tail,
            relation_label: r.relation,
        })
        .collect();

    Ok(Document {
        doc_id,
        title,
        sentences,
        entities,
        gold_relations,
        metadata: obj.into_iter().collect(),
    })
}

/// Serializes a dataset back to the DocRED layout.
pub fn to_docred_json(dataset: &Dataset) -> Value {
    let docs = dataset
        .documents
        .iter()
        .map(|doc| {
            let mut obj = Map::new();
            obj.insert("doc_id".into(), Value::String(doc.doc_id.clone()));
            obj.insert("title".into(), Value::String(doc.title.clone()));
            obj.insert("sents".into(), serde_json::json!(doc.sentences));
            let vertex_set: Vec<Value> = doc
                .entities
                .iter()
                .map(|e| {
                    Value::Array(
                        e.mentions
                            .iter()
                            .map(|m| {
                                serde_json::json!({
                                    "name": m.surface,
                                    "type": e.entity_type,
                                    "sent_id": m.sent_index,
                                    "pos": [m.token_span.0, m.token_span.1],
                                })
                            })
                            .collect(),
                    )
                })
                .collect();
            obj.insert("vertexSet".into(), Value::Array(vertex_set));
            let labels: Vec<Value> = doc
                .gold_relations
                .iter()
                .map(|r| serde_json::json!({"h": r.head_index, "t": r.tail_index, "r": r.relation_label}))
                .collect();
            obj.insert("labels".into(), Value::Array(labels));
            for (k, v) in &doc.metadata {
                obj.insert(k.clone(), v.clone());
            }
            Value::Object(obj)
        })
        .collect();
    Value::Array(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    GoldPairs,
    AllOrderedPairs,
}

pub fn enumerate_entity_pairs(doc: &Document, mode: PairMode) -> Vec<(usize, usize)> {
    match mode {
        PairMode::GoldPairs => {
            let mut seen = HashSet::new();
            doc.gold_relations
                .iter()
                .map(|r| (r.head_index, r.tail_index))
                .filter(|p| seen.insert(*p))
                .collect()
        }
        PairMode::AllOrderedPairs => {
            let n = doc.entities.len();
            (0..n)
                .flat_map(|h| (0..n).filter(move |&t| t != h).map(move |t| (h, t)))
                .collect()
        }
    }
}

/// Minimum sentence distance over all (head mention, tail mention) pairs.
pub fn sentence_gap(doc: &Document, head_index: usize, tail_index: usize) -> Result<usize> {
    let head = doc.entity(head_index)?;
    let tail = doc.entity(tail_index)?;
    let gap = head
        .mentions
        .iter()
        .flat_map(|m| tail.mentions.iter().map(move |n| m.sent_index.abs_diff(n.sent_index)))
        .min()
        .unwrap_or(0);
    Ok(gap)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub format: DatasetFormat,
    pub valid: bool,
    pub documents: usize,
    pub entities: usize,
    pub mentions: usize,
    pub relations: usize,
    pub labels: Vec<String>,
    pub skipped: Vec<SkippedDocument>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Loads a file leniently and summarizes every problem found, for `corpus validate`.
pub fn validate_file(path: &Path, format: DatasetFormat, check_surface: bool) -> ValidationReport {
    let opts = LoadOptions {
        lenient: true,
        check_surface,
    };
    let mut report = ValidationReport {
        path: path.display().to_string(),
        format,
        valid: false,
        documents: 0,
        entities: 0,
        mentions: 0,
        relations: 0,
        labels: Vec::new(),
        skipped: Vec::new(),
        error: None,
    };
    match load_dataset_with(path, format, opts) {
        Ok(outcome) => {
            let ds = &outcome.dataset;
            report.documents = ds.documents.len();
            report.entities = ds.entity_count();
            report.mentions = ds
                .documents
                .iter()
                .flat_map(|d| d.entities.iter())
                .map(|e| e.mentions.len())
                .sum();
            report.relations = ds.relation_count();
            report.labels = ds.labels();
            report.valid = outcome.skipped.is_empty();
            report.skipped = outcome.skipped;
        }
        Err(err) => report.error = Some(err.to_string()),
    }
    report
}
