//! Dialogue dataset schema: the fixed game background of a conversation and
//! its alternating player/NPC turns.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::ToolCall;
use crate::registry::{Registry, ToolResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub age: String,
    pub gender: String,
    pub occupation: String,
    pub appearance: String,
    /// Any further persona attributes, kept in file order.
    #[serde(flatten)]
    pub extras: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralSection {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemKnowledge {
    pub name: String,
    pub item_type: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knowledge {
    pub general_info: Vec<GeneralSection>,
    pub knowledge_info: Vec<ItemKnowledge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateInfo {
    pub location: String,
    pub time: String,
    pub weather: String,
}

/// Game context that stays fixed for the whole conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Background {
    pub worldview: String,
    pub persona: Persona,
    pub role: String,
    pub knowledge: Knowledge,
    pub state: StateInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Player,
    Npc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_results: Vec<ToolResult>,
}

impl Turn {
    pub fn player(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Player,
            text: text.into(),
            tool_calls: Vec::new(),
            tool_results: Vec::new(),
        }
    }

    pub fn npc(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Npc,
            text: text.into(),
            tool_calls: Vec::new(),
            tool_results: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub background: Background,
    pub function_list_id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Player turn texts in order.
    pub fn player_queries(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Player)
            .map(|t| t.text.as_str())
    }

    /// Structural invariants that do not need a registry.
    pub fn check_invariants(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut push = |field: String, kind: FindingKind| {
            findings.push(Finding {
                conversation_id: self.id.clone(),
                field,
                kind,
            })
        };

        if self.id.is_empty() {
            push("id".into(), FindingKind::EmptyId);
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Player } else { Speaker::Npc };
            if turn.speaker != expected {
                push(format!("turns[{i}].speaker"), FindingKind::TurnAlternation);
            }
            if turn.speaker == Speaker::Player
                && (!turn.tool_calls.is_empty() || !turn.tool_results.is_empty())
            {
                push(format!("turns[{i}]"), FindingKind::PlayerToolData);
            }
        }
        let mut seen = HashSet::new();
        for (i, item) in self.background.knowledge.knowledge_info.iter().enumerate() {
            let field = format!("background.knowledge.knowledge_info[{i}].name");
            if item.name.trim().is_empty() {
                push(field, FindingKind::EmptyItemName);
            } else if !seen.insert(item.name.as_str()) {
                push(field, FindingKind::DuplicateKnowledgeItem);
            }
        }
        findings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    EmptyId,
    TurnAlternation,
    PlayerToolData,
    EmptyItemName,
    DuplicateKnowledgeItem,
    UnresolvableFunctionList,
}

impl FindingKind {
    pub fn message(self) -> &'static str {
        match self {
            FindingKind::EmptyId => "empty conversation id",
            FindingKind::TurnAlternation => "turn alternation violated",
            FindingKind::PlayerToolData => "player turn carries tool calls or results",
            FindingKind::EmptyItemName => "empty knowledge item name",
            FindingKind::DuplicateKnowledgeItem => "duplicate knowledge item",
            FindingKind::UnresolvableFunctionList => "unresolvable function list",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub conversation_id: String,
    pub field: String,
    pub kind: FindingKind,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.conversation_id, self.kind.message(), self.field)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

pub fn validate_conversation(conv: &Conversation, registry: &Registry) -> ValidationReport {
    let mut findings = conv.check_invariants();
    if registry.lookup(&conv.function_list_id).is_err() {
        findings.push(Finding {
            conversation_id: conv.id.clone(),
            field: "function_list_id".into(),
            kind: FindingKind::UnresolvableFunctionList,
        });
    }
    ValidationReport { findings }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error at line {line}, column {column} ({field}): {message}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("conversation {conversation_id:?}, field {field}: {message}")]
    Invariant {
        conversation_id: String,
        field: String,
        message: &'static str,
    },
}

/// Parses a dataset without enforcing invariants (for reporting tools).
pub fn parse_dataset(text: &str) -> Result<Vec<Conversation>, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        DatasetError::Parse {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

/// Parses a dataset and rejects the first conversation that breaks an
/// invariant.
pub fn dataset_from_str(text: &str) -> Result<Vec<Conversation>, DatasetError> {
    let conversations = parse_dataset(text)?;
    for conv in &conversations {
        if let Some(finding) = conv.check_invariants().into_iter().next() {
            return Err(DatasetError::Invariant {
                conversation_id: finding.conversation_id,
                field: finding.field,
                message: finding.kind.message(),
            });
        }
    }
    Ok(conversations)
}

pub fn read_dataset_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Conversation>, DatasetError> {
    dataset_from_str(&read_dataset_text(path.as_ref())?)
}

pub fn dataset_to_string(conversations: &[Conversation]) -> String {
    serde_json::to_string_pretty(conversations).expect("conversations always serialize")
}

pub fn save_dataset(path: impl AsRef<Path>, conversations: &[Conversation]) -> std::io::Result<()> {
    let mut text = dataset_to_string(conversations);
    text.push('\n');
    fs::write(path, text)
}
