//! Text templates turned into embedding inputs.

use serde::{Deserialize, Serialize};

use super::EmbeddingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Head,
    Tail,
}

/// `Default` renders the tail as an object; `VerbatimAppendix` words both
/// roles as "subject".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Default,
    VerbatimAppendix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelNormalization {
    /// Underscores become spaces, then lowercase.
    #[default]
    Normalized,
    Raw,
}

fn non_empty<'a>(value: &'a str, field: &'static str) -> Result<&'a str, EmbeddingError> {
    if value.trim().is_empty() {
        Err(EmbeddingError::EmptyField(field))
    } else {
        Ok(value)
    }
}

pub fn render_role_prompt(
    entity_type: &str,
    hypernym: &str,
    role: Role,
    style: PromptStyle,
) -> Result<String, EmbeddingError> {
    let entity_type = non_empty(entity_type, "entity_type")?;
    let hypernym = non_empty(hypernym, "hypernym")?;
    let part = match (role, style) {
        (Role::Head, _) | (Role::Tail, PromptStyle::VerbatimAppendix) => "a subject",
        (Role::Tail, PromptStyle::Default) => "an object",
    };
    Ok(format!("{entity_type} acting as {part}, described as {hypernym}"))
}

pub fn render_context_prompt(head_hypernym: &str, tail_hypernym: &str) -> Result<String, EmbeddingError> {
    let head = non_empty(head_hypernym, "head_hypernym")?;
    let tail = non_empty(tail_hypernym, "tail_hypernym")?;
    Ok(format!("Relation between {head} and {tail}"))
}

pub fn combine_descriptions(head_description: &str, tail_description: &str) -> Result<String, EmbeddingError> {
    let head = non_empty(head_description, "head_description")?;
    let tail = non_empty(tail_description, "tail_description")?;
    Ok(format!("Head entity: {head} Tail entity: {tail}"))
}

pub fn normalize_label(label: &str, mode: LabelNormalization) -> Result<String, EmbeddingError> {
    let label = non_empty(label, "label")?;
    Ok(match mode {
        LabelNormalization::Raw => label.to_string(),
        LabelNormalization::Normalized => label.replace('_', " ").trim().to_lowercase(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub head_role_text: String,
    pub tail_role_text: String,
    pub context_text: String,
    pub combined_description_text: String,
}

/// Side information for one entity, as consumed by the pair renderer.
#[derive(Debug, Clone, Copy)]
pub struct EntitySide<'a> {
    pub entity_type: &'a str,
    pub description: &'a str,
    pub hypernym: &'a str,
}

/// Every text embedded for one ordered (head, tail) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTexts {
    pub bundle: PromptBundle,
    pub head_hypernym: String,
    pub tail_hypernym: String,
    pub head_type: String,
    pub tail_type: String,
}

impl PairTexts {
    pub fn render(head: EntitySide<'_>, tail: EntitySide<'_>, style: PromptStyle) -> Result<Self, EmbeddingError> {
        let bundle = PromptBundle {
            head_role_text: render_role_prompt(head.entity_type, head.hypernym, Role::Head, style)?,
            tail_role_text: render_role_prompt(tail.entity_type, tail.hypernym, Role::Tail, style)?,
            context_text: render_context_prompt(head.hypernym, tail.hypernym)?,
            combined_description_text: combine_descriptions(head.description, tail.description)?,
        };
        Ok(Self {
            bundle,
            head_hypernym: non_empty(head.hypernym, "hypernym")?.to_string(),
            tail_hypernym: non_empty(tail.hypernym, "hypernym")?.to_string(),
            head_type: non_empty(head.entity_type, "entity_type")?.to_string(),
            tail_type: non_empty(tail.entity_type, "entity_type")?.to_string(),
        })
    }

    /// Texts in embedding-slot order: a, b, c, d, e, f, g, context.
    pub fn as_slots(&self) -> [&str; 8] {
        [
            &self.bundle.combined_description_text,
            &self.head_hypernym,
            &self.tail_hypernym,
            &self.head_type,
            &self.tail_type,
            &self.bundle.head_role_text,
            &self.bundle.tail_role_text,
            &self.bundle.context_text,
        ]
    }
}
