//! Regenerates NPC turns of a dataset through a backend and emits
//! (system, user, target) training records.
//!
//! Two strategies differ only in the history shown at NPC turn k:
//!
//! * `sequential_replace`: gold player turns interleaved with the replies
//!   generated so far, so the dialogue drifts toward the generator's voice.
//! * `whole_history`: the original gold turns before k.

use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AdapterId, BackendError, GenerationParams, GenerationRequest, Generator};
use crate::codec::render_tool_calls;
use crate::context::{Conversation, Speaker, Turn};
use crate::prompt::{
    build_function_call_prompt, build_with_results_prompt, build_without_results_prompt, PromptBundle,
    PromptInputs, PromptScenario,
};
use crate::registry::{Registry, RegistryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SequentialReplace,
    WholeHistory,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SequentialReplace => "sequential_replace",
            Strategy::WholeHistory => "whole_history",
        }
    }
}

/// Dialogue scenario whose NPC replies are regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthScenario {
    #[default]
    WithoutResults,
    /// Only NPC turns that carry gold tool results are regenerated.
    WithResults,
}

impl SynthScenario {
    fn adapter(self) -> AdapterId {
        match self {
            SynthScenario::WithoutResults => AdapterId::DialogueWithoutResults,
            SynthScenario::WithResults => AdapterId::DialogueWithResults,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub strategy: Strategy,
    pub scenario: SynthScenario,
    pub params: GenerationParams,
}

impl SynthesisJob {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            scenario: SynthScenario::WithoutResults,
            params: GenerationParams::SYNTHESIS,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("conversation {conversation_id:?}, turn {turn_index}: {source}")]
    Backend {
        conversation_id: String,
        turn_index: usize,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Default)]
pub struct SynthesisOutput {
    /// Successfully regenerated conversations, in source order.
    pub conversations: Vec<Conversation>,
    /// One entry per conversation dropped because of a backend failure.
    pub failures: Vec<SynthesisError>,
}

/// The prompt shown for the NPC turn at `npc_index`, given the history that
/// the strategy selects.
fn prompt_for(scenario: SynthScenario, conv: &Conversation, history: &[Turn], npc_index: usize) -> Option<PromptBundle> {
    let query = &conv.turns[npc_index - 1].text;
    let inputs = PromptInputs::new(&conv.background, history, query);
    match scenario {
        SynthScenario::WithoutResults => Some(build_without_results_prompt(&inputs)),
        SynthScenario::WithResults => build_with_results_prompt(&inputs, &conv.turns[npc_index].tool_results).ok(),
    }
}

fn synthesize_one(
    job: &SynthesisJob,
    conv: &Conversation,
    backend: &dyn Generator,
) -> Result<Conversation, SynthesisError> {
    let mut output = conv.clone();
    for index in 0..conv.turns.len() {
        let is_reply = conv.turns[index].speaker == Speaker::Npc
            && index > 0
            && conv.turns[index - 1].speaker == Speaker::Player;
        if !is_reply {
            continue;
        }
        // history before the player query of this exchange
        let history = match job.strategy {
            Strategy::SequentialReplace => &output.turns[..index - 1],
            Strategy::WholeHistory => &conv.turns[..index - 1],
        };
        let Some(prompt) = prompt_for(job.scenario, conv, history, index) else {
            continue;
        };
        let text = backend
            .generate(&GenerationRequest {
                system: prompt.system,
                user: prompt.user,
                adapter: job.scenario.adapter(),
                params: job.params,
            })
            .map_err(|source| SynthesisError::Backend {
                conversation_id: conv.id.clone(),
                turn_index: index,
                source,
            })?;
        output.turns[index].text = text;
    }
    Ok(output)
}

/// Runs the job over every conversation. Conversations are independent and
/// processed in parallel; turns within one are strictly sequential.
pub fn synthesize(
    job: &SynthesisJob,
    source: &[Conversation],
    backend: Arc<dyn Generator>,
) -> Result<SynthesisOutput, SynthesisError> {
    job.params.validate().map_err(SynthesisError::InvalidParams)?;
    let results: Vec<_> = source
        .par_iter()
        .map(|conv| synthesize_one(job, conv, backend.as_ref()))
        .collect();
    let mut out = SynthesisOutput::default();
    for result in results {
        match result {
            Ok(conv) => out.conversations.push(conv),
            Err(err) => out.failures.push(err),
        }
    }
    Ok(out)
}

pub fn synthesize_sequential(
    job: &SynthesisJob,
    source: &[Conversation],
    backend: Arc<dyn Generator>,
) -> Result<SynthesisOutput, SynthesisError> {
    let job = SynthesisJob {
        strategy: Strategy::SequentialReplace,
        ..job.clone()
    };
    synthesize(&job, source, backend)
}

pub fn synthesize_whole_history(
    job: &SynthesisJob,
    source: &[Conversation],
    backend: Arc<dyn Generator>,
) -> Result<SynthesisOutput, SynthesisError> {
    let job = SynthesisJob {
        strategy: Strategy::WholeHistory,
        ..job.clone()
    };
    synthesize(&job, source, backend)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub conversation_id: String,
    pub turn_index: usize,
    pub strategy: Option<Strategy>,
    pub backend_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub scenario: PromptScenario,
    pub system: String,
    pub user: String,
    pub target: String,
    pub provenance: Provenance,
}

/// Where the records came from; copied into every record's provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleSource {
    pub strategy: Option<Strategy>,
    pub backend_model: String,
}

/// One record per NPC reply that belongs to `scenario`, prompts built with
/// the matching builder over the conversation's own preceding turns.
///
/// * function call: every reply; target is its rendered tool calls.
/// * with results: replies that carry tool results.
/// * without results: replies without tool results.
pub fn emit_training_examples(
    convs: &[Conversation],
    scenario: PromptScenario,
    registry: &Registry,
    source: &ExampleSource,
) -> Result<Vec<TrainingExample>, RegistryError> {
    let mut examples = Vec::new();
    for conv in convs {
        for index in 1..conv.turns.len() {
            let turn = &conv.turns[index];
            if turn.speaker != Speaker::Npc || conv.turns[index - 1].speaker != Speaker::Player {
                continue;
            }
            let inputs = PromptInputs::new(&conv.background, &conv.turns[..index - 1], &conv.turns[index - 1].text);
            let built = match scenario {
                PromptScenario::FunctionCall => {
                    let list = registry.lookup(&conv.function_list_id)?;
                    Some((build_function_call_prompt(&inputs, list, ""), render_tool_calls(&turn.tool_calls)))
                }
                PromptScenario::WithResults => build_with_results_prompt(&inputs, &turn.tool_results)
                    .ok()
                    .map(|p| (p, turn.text.clone())),
                PromptScenario::WithoutResults if turn.tool_results.is_empty() => {
                    Some((build_without_results_prompt(&inputs), turn.text.clone()))
                }
                PromptScenario::WithoutResults => None,
            };
            if let Some((prompt, target)) = built {
                examples.push(TrainingExample {
                    scenario,
                    system: prompt.system,
                    user: prompt.user,
                    target,
                    provenance: Provenance {
                        conversation_id: conv.id.clone(),
                        turn_index: index,
                        strategy: source.strategy,
                        backend_model: source.backend_model.clone(),
                    },
                });
            }
        }
    }
    Ok(examples)
}

pub fn write_training_examples<W: Write>(mut writer: W, examples: &[TrainingExample]) -> io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut writer, example)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
