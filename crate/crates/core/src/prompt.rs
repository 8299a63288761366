//! Scenario-specific (system, user) prompt pairs.
//!
//! Each scenario sees a different slice of the background:
//!
//! * function call: tool signatures, state, item knowledge, history. No
//!   worldview, no persona.
//! * with results: role, persona, tool results, item knowledge. No worldview.
//! * without results: role, state, persona, worldview. No item knowledge.
//!
//! Templates are plain-text assets; placeholders are spliced in literally in
//! a single pass, so substituted text is never re-expanded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{render_tool_results, render_tools_block};
use crate::context::{Background, Conversation, Speaker, Turn};
use crate::registry::{FunctionList, ToolResult};

pub const TEMPLATE_VERSION: &str = "v1";

const FUNCTION_CALL_SYSTEM: &str = include_str!("../templates/function_call.system.txt");
const FUNCTION_CALL_USER: &str = include_str!("../templates/function_call.user.txt");
const WITH_RESULTS_SYSTEM: &str = include_str!("../templates/with_results.system.txt");
const WITHOUT_RESULTS_SYSTEM: &str = include_str!("../templates/without_results.system.txt");
const DIALOGUE_USER: &str = include_str!("../templates/dialogue.user.txt");

/// Marks where player-supplied dialogue starts in every user template.
pub const HISTORY_MARKER: &str = "conversation history:\n";

pub const WITH_RESULTS_WORD_LIMIT: usize = 90;
pub const WITHOUT_RESULTS_WORD_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptScenario {
    FunctionCall,
    WithResults,
    WithoutResults,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub scenario: PromptScenario,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("with-results prompt needs at least one tool result")]
    NoResults,
}

/// What every builder needs: the fixed background, the turns so far and the
/// current player query.
#[derive(Debug, Clone, Copy)]
pub struct PromptInputs<'a> {
    pub background: &'a Background,
    pub history: &'a [Turn],
    pub query: &'a str,
}

impl<'a> PromptInputs<'a> {
    pub fn new(background: &'a Background, history: &'a [Turn], query: &'a str) -> Self {
        Self {
            background,
            history,
            query,
        }
    }

    /// Uses the whole turn list of `conv` as history.
    pub fn from_conversation(conv: &'a Conversation, query: &'a str) -> Self {
        Self::new(&conv.background, &conv.turns, query)
    }
}

pub fn build_function_call_prompt(
    inputs: &PromptInputs<'_>,
    list: &FunctionList,
    additional_info: &str,
) -> PromptBundle {
    let tools = render_tools_block(list);
    let state = render_state(inputs.background);
    let knowledge = render_item_knowledge(inputs.background);
    let history = render_history(inputs.history);
    PromptBundle {
        system: fill(FUNCTION_CALL_SYSTEM, &[("tools", &tools)]),
        user: fill(
            FUNCTION_CALL_USER,
            &[
                ("state", &state),
                ("knowledge_info", &knowledge),
                ("additional_information", additional_info),
                ("history", &history),
                ("query", inputs.query),
            ],
        ),
        scenario: PromptScenario::FunctionCall,
    }
}

pub fn build_with_results_prompt(
    inputs: &PromptInputs<'_>,
    results: &[ToolResult],
) -> Result<PromptBundle, PromptError> {
    if results.is_empty() {
        return Err(PromptError::NoResults);
    }
    let persona = render_persona(inputs.background);
    let rendered_results = render_tool_results(results);
    let knowledge = render_item_knowledge(inputs.background);
    Ok(PromptBundle {
        system: fill(
            WITH_RESULTS_SYSTEM,
            &[
                ("role", &inputs.background.role),
                ("persona", &persona),
                ("function_call_result", &rendered_results),
                ("knowledge_info", &knowledge),
            ],
        ),
        user: dialogue_user(inputs),
        scenario: PromptScenario::WithResults,
    })
}

pub fn build_without_results_prompt(inputs: &PromptInputs<'_>) -> PromptBundle {
    let state = render_state(inputs.background);
    let persona = render_persona(inputs.background);
    PromptBundle {
        system: fill(
            WITHOUT_RESULTS_SYSTEM,
            &[
                ("role", &inputs.background.role),
                ("state", &state),
                ("persona", &persona),
                ("worldview", &inputs.background.worldview),
            ],
        ),
        user: dialogue_user(inputs),
        scenario: PromptScenario::WithoutResults,
    }
}

fn dialogue_user(inputs: &PromptInputs<'_>) -> String {
    let history = render_history(inputs.history);
    fill(DIALOGUE_USER, &[("history", &history), ("query", inputs.query)])
}

/// `User: ...` / `NPC: ...` lines in turn order.
pub fn render_history(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|turn| match turn.speaker {
            Speaker::Player => format!("User: {}", turn.text),
            Speaker::Npc => format!("NPC: {}", turn.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_state(background: &Background) -> String {
    let state = &background.state;
    format!(
        "location: {}\ntime: {}\nweather: {}",
        state.location, state.time, state.weather
    )
}

pub fn render_item_knowledge(background: &Background) -> String {
    background
        .knowledge
        .knowledge_info
        .iter()
        .map(|item| format!("{} ({}): {}", item.name, item.item_type, item.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_persona(background: &Background) -> String {
    let persona = &background.persona;
    let mut out = format!(
        "name: {}\nage: {}\ngender: {}\noccupation: {}\nappearance: {}",
        persona.name, persona.age, persona.gender, persona.occupation, persona.appearance
    );
    for (key, value) in &persona.extras {
        let _ = write!(out, "\n{key}: {value}");
    }
    out
}

/// Replaces `{key}` occurrences for the given keys; other braces are kept.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCheck {
    pub word_count: usize,
    pub limit: Option<usize>,
    pub within_limit: bool,
}

/// Whitespace-token word count against the scenario's advisory limit.
pub fn check_word_limit(response: &str, scenario: PromptScenario) -> WordCheck {
    let word_count = response.split_whitespace().count();
    let limit = match scenario {
        PromptScenario::FunctionCall => None,
        PromptScenario::WithResults => Some(WITH_RESULTS_WORD_LIMIT),
        PromptScenario::WithoutResults => Some(WITHOUT_RESULTS_WORD_LIMIT),
    };
    WordCheck {
        word_count,
        limit,
        within_limit: limit.is_none_or(|l| word_count <= l),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionViolation {
    pub scenario: PromptScenario,
    pub excluded: String,
    pub matched: String,
}

/// Checks that a prompt leaves out the background parts its scenario must
/// not see. Only the context sections are inspected: the dialogue history
/// and query are player content and may mention anything.
pub fn check_exclusions(bundle: &PromptBundle, background: &Background) -> Vec<ExclusionViolation> {
    let user_context = bundle
        .user
        .find(HISTORY_MARKER)
        .map_or(bundle.user.as_str(), |at| &bundle.user[..at]);
    let haystacks = [bundle.system.as_str(), user_context];
    let mut violations = Vec::new();
    let mut forbid = |excluded: &str, needle: &str| {
        let needle = needle.trim();
        if !needle.is_empty() && haystacks.iter().any(|h| h.contains(needle)) {
            violations.push(ExclusionViolation {
                scenario: bundle.scenario,
                excluded: excluded.to_string(),
                matched: needle.to_string(),
            });
        }
    };

    match bundle.scenario {
        PromptScenario::FunctionCall | PromptScenario::WithResults => {
            forbid("worldview", &background.worldview);
            if let Some(first) = first_sentence(&background.worldview) {
                forbid("worldview", first);
            }
        }
        PromptScenario::WithoutResults => {
            for item in &background.knowledge.knowledge_info {
                forbid("knowledge_info", &item.name);
            }
        }
    }
    if bundle.scenario == PromptScenario::FunctionCall {
        let persona = &background.persona;
        forbid("persona", &persona.name);
        forbid("persona", &persona.occupation);
        forbid("persona", &persona.appearance);
        for value in persona.extras.values() {
            forbid("persona", value);
        }
    }
    violations
}

fn first_sentence(text: &str) -> Option<&str> {
    let end = text.find(['.', '!', '?']).map_or(text.len(), |i| i + 1);
    let sentence = text[..end].trim();
    (!sentence.is_empty()).then_some(sentence)
}
