//! Bundled synthetic corpus and a scripted chat client for offline runs.
//!
//! Ten documents, four relations each, over sixteen labels. Every relation
//! gets a fresh head and tail entity. The scripted descriptions of both
//! entities name the true label and one distractor label, so descriptions
//! alone cannot always separate the two. Hypernyms repeat the label words for
//! the labels in [`SIGNAL_LABELS`] and are generic for the rest; entity types
//! carry no label information.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::corpus::{Dataset, Document, Entity, Mention, RelationInstance};
use crate::sideinfo::{ChatClient, ChatError, ChatRequest};

pub const DATASET_NAME: &str = "synthetic";
pub const DOCUMENTS: usize = 10;
pub const RELATIONS_PER_DOC: usize = 4;
const SENTENCES_PER_DOC: usize = 8;

/// (label, head type, tail type, hypernyms informative)
const LABELS: [(&str, &str, &str, bool); 16] = [
    ("educated at", "PER", "ORG", true),
    ("place of birth", "PER", "LOC", false),
    ("employer", "PER", "ORG", true),
    ("member of", "PER", "ORG", false),
    ("located in", "ORG", "LOC", true),
    ("founded by", "ORG", "PER", false),
    ("spouse", "PER", "PER", true),
    ("country", "LOC", "LOC", false),
    ("award received", "PER", "MISC", true),
    ("headquarters location", "ORG", "LOC", false),
    ("record label", "PER", "ORG", true),
    ("capital", "LOC", "LOC", false),
    ("publisher", "MISC", "ORG", true),
    ("sibling", "PER", "PER", false),
    ("director", "MISC", "PER", true),
    ("religion", "PER", "ORG", false),
];

pub const SIGNAL_LABELS: [&str; 8] = [
    "educated at",
    "employer",
    "located in",
    "spouse",
    "award received",
    "record label",
    "publisher",
    "director",
];

const ONSETS: [&str; 12] = ["ta", "ve", "ri", "lo", "mu", "ka", "zo", "ne", "pi", "du", "sa", "fe"];
const CODAS: [&str; 6] = ["rn", "lk", "x", "nd", "sk", "mb"];

fn generic_hypernym(entity_type: &str) -> &'static str {
    match entity_type {
        "PER" => "public person",
        "ORG" => "formal group",
        "LOC" => "regional place",
        _ => "creative work",
    }
}

/// Deterministic invented name, unique per `serial`.
fn invented_name(serial: usize) -> String {
    let word = |n: usize| {
        let mut w = String::new();
        w.push_str(ONSETS[n % ONSETS.len()]);
        w.push_str(ONSETS[(n / ONSETS.len()) % ONSETS.len()]);
        w.push_str(CODAS[(n / (ONSETS.len() * ONSETS.len())) % CODAS.len()]);
        let mut chars = w.chars();
        let first = chars.next().expect("non-empty").to_ascii_uppercase();
        std::iter::once(first).chain(chars).collect::<String>()
    };
    format!("{} {}", word(2 * serial), word(2 * serial + 1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedEntity {
    pub description: String,
    pub hypernym: String,
}

/// The corpus together with the side information the scripted client returns.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Keyed by mention surface, which is unique across the corpus.
    pub script: HashMap<String, ScriptedEntity>,
}

pub fn labels() -> Vec<&'static str> {
    LABELS.iter().map(|l| l.0).collect()
}

pub fn corpus() -> SyntheticCorpus {
    let mut script = HashMap::new();
    let mut documents = Vec::with_capacity(DOCUMENTS);
    let mut serial = 0;
    for d in 0..DOCUMENTS {
        let mut sentences: Vec<Vec<String>> = vec![Vec::new(); SENTENCES_PER_DOC];
        let mut entities = Vec::new();
        let mut gold_relations = Vec::new();
        for r in 0..RELATIONS_PER_DOC {
            let slot = d * RELATIONS_PER_DOC + r;
            let (label, head_type, tail_type, signal) = LABELS[slot % LABELS.len()];
            let distractor = LABELS[(slot + 1 + d) % LABELS.len()].0;
            let distractor = if distractor == label { LABELS[(slot + 2) % LABELS.len()].0 } else { distractor };

            let head_name = invented_name(serial);
            let tail_name = invented_name(serial + 1);
            serial += 2;

            // Gaps cycle through 0..=6 so every bucket is populated.
            let gap = (d + 3 * r) % 7;
            let head_sent = r % (SENTENCES_PER_DOC - gap).max(1);
            let tail_sent = head_sent + gap;
            for (name, entity_type, sent) in [(&head_name, head_type, head_sent), (&tail_name, tail_type, tail_sent)] {
                let sentence = &mut sentences[sent];
                let start = sentence.len();
                sentence.extend(name.split(' ').map(str::to_string));
                let end = sentence.len();
                sentence.extend(["appears", "here", "."].map(str::to_string));
                entities.push(Entity {
                    entity_index: entities.len(),
                    mentions: vec![Mention {
                        surface: name.clone(),
                        sent_index: sent,
                        token_span: (start, end),
                    }],
                    entity_type: entity_type.to_string(),
                });
            }
            gold_relations.push(RelationInstance {
                head_index: entities.len() - 2,
                tail_index: entities.len() - 1,
                relation_label: label.to_string(),
            });

            let (head_hyp, tail_hyp) = if signal {
                (format!("{label} holder"), format!("{label} party"))
            } else {
                (generic_hypernym(head_type).to_string(), generic_hypernym(tail_type).to_string())
            };
            script.insert(
                head_name.clone(),
                ScriptedEntity {
                    description: format!(
                        "{head_name} is tied to {tail_name} through {label}. Reports also note {distractor}."
                    ),
                    hypernym: head_hyp,
                },
            );
            script.insert(
                tail_name.clone(),
                ScriptedEntity {
                    description: format!(
                        "{tail_name} is tied to {head_name} through {distractor}. Reports also note {label}."
                    ),
                    hypernym: tail_hyp,
                },
            );
        }
        for sentence in &mut sentences {
            if sentence.is_empty() {
                sentence.extend(["Nothing", "notable", "happened", "."].map(str::to_string));
            }
        }
        documents.push(Document {
            doc_id: format!("synth-{d:02}"),
            title: format!("Synthetic document {d}"),
            sentences,
            entities,
            gold_relations,
            metadata: Default::default(),
        });
    }
    SyntheticCorpus {
        dataset: Dataset::from_documents(DATASET_NAME, documents),
        script,
    }
}

/// Answers description and hypernym prompts from a fixed script.
///
/// The entity is read from the `Entity:` line of the last user message; a
/// `Description:` line marks a hypernym request.
pub struct ScriptedChatClient {
    script: HashMap<String, ScriptedEntity>,
    calls: AtomicUsize,
}

impl ScriptedChatClient {
    pub fn new(script: HashMap<String, ScriptedEntity>) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let field = |name: &str| {
            prompt
                .lines()
                .find_map(|l| l.trim().strip_prefix(name))
                .map(str::trim)
        };
        let entity = field("Entity:").ok_or_else(|| ChatError::Service {
            status: Some(400),
            body: "prompt has no 'Entity:' line".into(),
        })?;
        let scripted = self.script.get(entity).ok_or_else(|| ChatError::Service {
            status: Some(404),
            body: format!("no scripted answer for '{entity}'"),
        })?;
        Ok(if field("Description:").is_some() {
            scripted.hypernym.clone()
        } else {
            scripted.description.clone()
        })
    }
}
