//! Runs one dialogue turn end to end.
//!
//! Stage 1 asks the tool-call adapter for `<tool_call>` regions, validates
//! and executes them. Stage 2 picks the dialogue adapter: the with-results
//! adapter when stage 1 produced any result, the without-results adapter
//! otherwise.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AdapterId, BackendError, GenerationParams, GenerationRequest, Generator};
use crate::codec::{parse_tool_calls, ParseDiagnostics, ToolCall};
use crate::context::{validate_conversation, Conversation, Speaker, Turn, ValidationReport};
use crate::prompt::{
    build_function_call_prompt, build_with_results_prompt, build_without_results_prompt, PromptBundle,
    PromptInputs,
};
use crate::registry::{validate_call, CallReport, Registry, Strictness, ToolResult, ToolStatus};

pub const DEFAULT_TURN_DEADLINE: Duration = Duration::from_secs(7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WithResults,
    WithoutResults,
}

/// Which results count as "the tool stage yielded something".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingRule {
    /// Any executed call, including lookups that found nothing.
    #[default]
    AnyResult,
    /// Only results with status ok; the rest are dropped before stage 2.
    OkOnly,
}

pub fn classify_scenario(results: &[ToolResult]) -> Scenario {
    if results.is_empty() {
        Scenario::WithoutResults
    } else {
        Scenario::WithResults
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    #[serde(with = "duration_ms")]
    pub turn_deadline: Duration,
    pub tool_call_params: GenerationParams,
    pub with_results_params: GenerationParams,
    pub without_results_params: GenerationParams,
    /// Keep only the last N turns of history in prompts. `None` keeps all.
    pub history_max_turns: Option<usize>,
    pub routing: RoutingRule,
    pub argument_strictness: Strictness,
    /// Passed verbatim into the function-call prompt.
    pub additional_info: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            turn_deadline: DEFAULT_TURN_DEADLINE,
            tool_call_params: GenerationParams::GREEDY,
            with_results_params: GenerationParams::GREEDY,
            without_results_params: GenerationParams::GREEDY,
            history_max_turns: None,
            routing: RoutingRule::AnyResult,
            argument_strictness: Strictness::Lenient,
            additional_info: String::new(),
        }
    }
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCall {
    pub call: ToolCall,
    pub report: CallReport,
}

/// Trace of one turn. `scenario` is with_results exactly when `results` is
/// non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub query: String,
    pub scenario: Scenario,
    pub raw_toolcall_output: String,
    pub parsed_calls: Vec<ToolCall>,
    pub parse_diagnostics: ParseDiagnostics,
    pub valid_calls: Vec<ToolCall>,
    pub rejected_calls: Vec<RejectedCall>,
    pub results: Vec<ToolResult>,
    pub response_adapter: AdapterId,
    pub response: String,
    /// Stage name → wall time in milliseconds.
    pub timings: BTreeMap<String, f64>,
    pub deadline_exceeded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ToolCall,
    Response,
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("player query is empty")]
    EmptyQuery,
    #[error("{stage:?} stage failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Internal(#[from] crate::registry::ExecuteError),
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("conversation {id:?} is not runnable: {findings:?}")]
    InvalidConversation { id: String, findings: ValidationReport },
    #[error("conversation must end with an NPC turn before the next player query")]
    AwaitingNpc,
}

/// A live conversation bound to a backend and registry.
///
/// `run_turn` takes `&mut self`, so one session never has two turns in
/// flight. Sessions are `Send` and can move between threads.
pub struct Session {
    conversation: Conversation,
    backend: Arc<dyn Generator>,
    registry: Arc<Registry>,
    settings: RunSettings,
}

impl Session {
    pub fn new(
        conversation: Conversation,
        backend: Arc<dyn Generator>,
        registry: Arc<Registry>,
        settings: RunSettings,
    ) -> Result<Self, SessionError> {
        let report = validate_conversation(&conversation, &registry);
        if !report.is_valid() {
            return Err(SessionError::InvalidConversation {
                id: conversation.id.clone(),
                findings: report,
            });
        }
        if conversation.turns.last().is_some_and(|t| t.speaker == Speaker::Player) {
            return Err(SessionError::AwaitingNpc);
        }
        Ok(Self {
            conversation,
            backend,
            registry,
            settings,
        })
    }

    pub fn conversation(&self) -> &Conversation {
        &self.conversation
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    fn history(&self) -> &[Turn] {
        let turns = &self.conversation.turns;
        match self.settings.history_max_turns {
            Some(max) if turns.len() > max => &turns[turns.len() - max..],
            _ => turns,
        }
    }

    pub fn run_turn(&mut self, user_query: &str) -> Result<TurnOutcome, TurnError> {
        if user_query.trim().is_empty() {
            return Err(TurnError::EmptyQuery);
        }
        let started = Instant::now();
        let mut timings = BTreeMap::new();
        let list = self
            .registry
            .lookup(&self.conversation.function_list_id)
            .map_err(crate::registry::ExecuteError::from)?;
        let inputs = PromptInputs::new(&self.conversation.background, self.history(), user_query);

        let stage = Instant::now();
        let prompt = build_function_call_prompt(&inputs, list, &self.settings.additional_info);
        let raw_toolcall_output = self
            .generate(prompt, AdapterId::ToolCall, self.settings.tool_call_params)
            .map_err(|source| TurnError::Backend {
                stage: Stage::ToolCall,
                source,
            })?;
        timings.insert("tool_call_generation".to_string(), ms(stage.elapsed()));

        let stage = Instant::now();
        let (parsed_calls, parse_diagnostics) = parse_tool_calls(&raw_toolcall_output);
        let mut valid_calls = Vec::new();
        let mut rejected_calls = Vec::new();
        for call in &parsed_calls {
            let report = validate_call(call, list, self.settings.argument_strictness);
            if report.is_valid() {
                valid_calls.push(call.clone());
            } else {
                rejected_calls.push(RejectedCall {
                    call: call.clone(),
                    report,
                });
            }
        }
        let mut results = valid_calls
            .iter()
            .map(|call| self.registry.execute_tool(call, &self.conversation))
            .collect::<Result<Vec<_>, _>>()?;
        if self.settings.routing == RoutingRule::OkOnly {
            results.retain(|r| r.status == ToolStatus::Ok);
        }
        timings.insert("tool_execution".to_string(), ms(stage.elapsed()));

        let scenario = classify_scenario(&results);
        let stage = Instant::now();
        let (prompt, adapter, params) = match scenario {
            Scenario::WithResults => (
                build_with_results_prompt(&inputs, &results).expect("results are non-empty"),
                AdapterId::DialogueWithResults,
                self.settings.with_results_params,
            ),
            Scenario::WithoutResults => (
                build_without_results_prompt(&inputs),
                AdapterId::DialogueWithoutResults,
                self.settings.without_results_params,
            ),
        };
        let response = self
            .generate(prompt, adapter, params)
            .map_err(|source| TurnError::Backend {
                stage: Stage::Response,
                source,
            })?;
        timings.insert("response_generation".to_string(), ms(stage.elapsed()));

        let total = started.elapsed();
        timings.insert("total".to_string(), ms(total));

        self.conversation.turns.push(Turn::player(user_query));
        self.conversation.turns.push(Turn {
            speaker: Speaker::Npc,
            text: response.clone(),
            tool_calls: valid_calls.clone(),
            tool_results: results.clone(),
        });

        Ok(TurnOutcome {
            query: user_query.to_string(),
            scenario,
            raw_toolcall_output,
            parsed_calls,
            parse_diagnostics,
            valid_calls,
            rejected_calls,
            results,
            response_adapter: adapter,
            response,
            timings,
            deadline_exceeded: total > self.settings.turn_deadline,
        })
    }

    fn generate(
        &self,
        prompt: PromptBundle,
        adapter: AdapterId,
        params: GenerationParams,
    ) -> Result<String, BackendError> {
        self.backend.generate(&GenerationRequest {
            system: prompt.system,
            user: prompt.user,
            adapter,
            params,
        })
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Error)]
pub enum ConversationError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("turn {turn_index} of {conversation_id:?} aborted: {source}")]
    Turn {
        conversation_id: String,
        turn_index: usize,
        #[source]
        source: TurnError,
    },
}

/// Replays the gold player turns of `conv`, feeding predicted NPC replies
/// (not gold ones) into later history. One outcome per player turn.
pub fn run_conversation(
    conv: &Conversation,
    backend: Arc<dyn Generator>,
    registry: Arc<Registry>,
    settings: RunSettings,
) -> Result<Vec<TurnOutcome>, ConversationError> {
    let mut fresh = conv.clone();
    fresh.turns.clear();
    let mut session = Session::new(fresh, backend, registry, settings)?;
    conv.player_queries()
        .enumerate()
        .map(|(turn_index, query)| {
            session.run_turn(query).map_err(|source| ConversationError::Turn {
                conversation_id: conv.id.clone(),
                turn_index,
                source,
            })
        })
        .collect()
}

/// Writes outcomes as JSON lines.
pub fn write_trace<W: Write>(mut writer: W, outcomes: &[TurnOutcome]) -> io::Result<()> {
    for outcome in outcomes {
        serde_json::to_writer(&mut writer, outcome)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
