//! Versioned chat prompt templates.
//!
//! A template file starts with `# version: <id>`, followed by a `[system]`
//! section and a `[user]` section. `{name}` placeholders are substituted at
//! render time; unknown placeholders are left as-is.

use std::fs;
use std::path::Path;

use super::client::ChatMessage;
use super::SideInfoError;

pub const DEFAULT_DESCRIPTION_TEMPLATE: &str = include_str!("../../prompts/description.txt");
pub const DEFAULT_HYPERNYM_TEMPLATE: &str = include_str!("../../prompts/hypernym.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, SideInfoError> {
        let bad = |reason: &str| SideInfoError::Template(reason.to_string());
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.trim().strip_prefix("# version:"))
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| bad("first line must be '# version: <id>'"))?;

        let (mut system, mut user) = (Vec::new(), Vec::new());
        let mut section: Option<&mut Vec<&str>> = None;
        for line in lines {
            match line.trim() {
                "[system]" => section = Some(&mut system),
                "[user]" => section = Some(&mut user),
                _ => match section.as_mut() {
                    Some(buf) => buf.push(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(bad("text before the first section")),
                },
            }
        }
        let system = system.join("\n").trim().to_string();
        let user = user.join("\n").trim().to_string();
        if user.is_empty() {
            return Err(bad("missing [user] section"));
        }
        Ok(Self { version, system, user })
    }

    pub fn load(path: &Path) -> Result<Self, SideInfoError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SideInfoError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
        let fill = |template: &str| {
            vars.iter()
                .fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
        };
        let mut messages = Vec::with_capacity(2);
        if !self.system.is_empty() {
            messages.push(ChatMessage::system(fill(&self.system)));
        }
        messages.push(ChatMessage::user(fill(&self.user)));
        messages
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub description: PromptTemplate,
    pub hypernym: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            description: PromptTemplate::parse(DEFAULT_DESCRIPTION_TEMPLATE).expect("bundled template parses"),
            hypernym: PromptTemplate::parse(DEFAULT_HYPERNYM_TEMPLATE).expect("bundled template parses"),
        }
    }
}

impl PromptSet {
    /// Reads `description.txt` and `hypernym.txt` from `dir`, falling back to
    /// the bundled template for any file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, SideInfoError> {
        let mut set = Self::default();
        let desc = dir.join("description.txt");
        if desc.exists() {
            set.description = PromptTemplate::load(&desc)?;
        }
        let hyp = dir.join("hypernym.txt");
        if hyp.exists() {
            set.hypernym = PromptTemplate::load(&hyp)?;
        }
        Ok(set)
    }

    /// Combined version tag stored on every record.
    pub fn version(&self) -> String {
        format!("{}+{}", self.description.version, self.hypernym.version)
    }
}
