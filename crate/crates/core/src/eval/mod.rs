//! Offline evaluation over a dataset with gold NPC turns.

mod metrics;

pub use metrics::*;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Generator;
use crate::codec::ToolCall;
use crate::context::{Conversation, Speaker};
use crate::registry::Registry;
use crate::router::{run_conversation, RunSettings, Scenario};

pub const METRIC_VERSION: &str = "surrogate-v1";

pub const SURROGATE_NOTE: &str = "function_score is exact-match multiset F1 over canonical tool calls; \
     text_score is sentence chrF (char order 6, beta 2) and stands in for both BLEURT and CPDC Score. \
     Absolute values are not comparable to the official metrics.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Conversations whose gold NPC turns contain tool calls.
    Task1,
    /// Conversations without gold tool calls.
    Task2,
}

pub fn task_kind(conv: &Conversation) -> TaskKind {
    let has_calls = conv
        .turns
        .iter()
        .any(|t| t.speaker == Speaker::Npc && !t.tool_calls.is_empty());
    if has_calls {
        TaskKind::Task1
    } else {
        TaskKind::Task2
    }
}

/// Gold calls and text of one NPC turn.
pub type GoldTurn = (Vec<ToolCall>, String);

/// Gold NPC turn following each player turn; `None` if the player turn is last.
pub fn gold_pairs(conv: &Conversation) -> Vec<(String, Option<GoldTurn>)> {
    let turns = &conv.turns;
    turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == Speaker::Player)
        .map(|(i, t)| {
            let gold = turns
                .get(i + 1)
                .filter(|next| next.speaker == Speaker::Npc)
                .map(|next| (next.tool_calls.clone(), next.text.clone()));
            (t.text.clone(), gold)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_index: usize,
    pub query: String,
    pub scenario: Scenario,
    pub predicted_calls: Vec<ToolCall>,
    pub gold_calls: Vec<ToolCall>,
    pub response: String,
    pub gold_response: String,
    pub score: TurnScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationReport {
    pub conversation_id: String,
    pub task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub turns: Vec<TurnReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_function_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_text_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub task1: Option<f64>,
    pub task2: Option<f64>,
    pub task3: Option<f64>,
    pub task1_function_mean: Option<f64>,
    pub task1_text_mean: Option<f64>,
    pub task2_text_mean: Option<f64>,
    pub task1_turns: usize,
    pub task2_turns: usize,
    pub failed_conversations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub system: String,
    pub backend_models: BTreeMap<String, String>,
    pub settings: RunSettings,
    pub conversations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_version: String,
    pub surrogates: String,
    pub config: EvalConfig,
    /// True when at least one conversation failed and was left out.
    pub partial: bool,
    pub aggregates: Aggregates,
    pub conversations: Vec<ConversationReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Runs every conversation (in parallel) and scores predictions against
/// the gold NPC turns. Timings are left out so reports are reproducible.
pub fn run_eval(
    system: &str,
    dataset: &[Conversation],
    backend: Arc<dyn Generator>,
    registry: Arc<Registry>,
    settings: &RunSettings,
) -> EvalReport {
    let conversations: Vec<ConversationReport> = dataset
        .par_iter()
        .map(|conv| evaluate_conversation(conv, backend.clone(), registry.clone(), settings.clone()))
        .collect();

    let backend_models = crate::backend::AdapterId::ALL
        .iter()
        .map(|a| (a.as_str().to_string(), backend.model_name(*a)))
        .collect();

    EvalReport {
        metric_version: METRIC_VERSION.into(),
        surrogates: SURROGATE_NOTE.into(),
        config: EvalConfig {
            system: system.into(),
            backend_models,
            settings: settings.clone(),
            conversations: dataset.len(),
        },
        partial: conversations.iter().any(|c| c.error.is_some()),
        aggregates: aggregate(&conversations),
        conversations,
    }
}

fn evaluate_conversation(
    conv: &Conversation,
    backend: Arc<dyn Generator>,
    registry: Arc<Registry>,
    settings: RunSettings,
) -> ConversationReport {
    let task = task_kind(conv);
    let mut report = ConversationReport {
        conversation_id: conv.id.clone(),
        task,
        error: None,
        turns: Vec::new(),
        mean_function_score: None,
        mean_text_score: None,
    };
    let outcomes = match run_conversation(conv, backend, registry, settings) {
        Ok(outcomes) => outcomes,
        Err(err) => {
            report.error = Some(err.to_string());
            return report;
        }
    };
    for (turn_index, ((query, gold), outcome)) in gold_pairs(conv).into_iter().zip(outcomes).enumerate() {
        let Some((gold_calls, gold_response)) = gold else {
            continue;
        };
        let score = TurnScore::compute(&outcome.parsed_calls, &outcome.response, &gold_calls, &gold_response);
        report.turns.push(TurnReport {
            turn_index,
            query,
            scenario: outcome.scenario,
            predicted_calls: outcome.parsed_calls,
            gold_calls,
            response: outcome.response,
            gold_response,
            score,
        });
    }
    if !report.turns.is_empty() {
        let n = report.turns.len() as f64;
        report.mean_function_score = Some(report.turns.iter().map(|t| t.score.function_score).sum::<f64>() / n);
        report.mean_text_score = Some(report.turns.iter().map(|t| t.score.text_score).sum::<f64>() / n);
    }
    report
}

fn aggregate(conversations: &[ConversationReport]) -> Aggregates {
    let turns_for = |kind: TaskKind| -> Vec<TurnScore> {
        conversations
            .iter()
            .filter(|c| c.error.is_none() && c.task == kind)
            .flat_map(|c| c.turns.iter().map(|t| t.score))
            .collect()
    };
    let t1 = turns_for(TaskKind::Task1);
    let t2 = turns_for(TaskKind::Task2);
    let mean = |xs: &[TurnScore], f: fn(&TurnScore) -> f64| {
        (!xs.is_empty()).then(|| xs.iter().map(f).sum::<f64>() / xs.len() as f64)
    };
    let task1 = score_task1(&t1).ok();
    let task2 = score_task2(&t2).ok();
    let task3 = match (task1, task2) {
        (Some(a), Some(b)) => score_task3(a, b).ok(),
        _ => None,
    };
    Aggregates {
        task1,
        task2,
        task3,
        task1_function_mean: mean(&t1, |t| t.function_score),
        task1_text_mean: mean(&t1, |t| t.text_score),
        task2_text_mean: mean(&t2, |t| t.text_score),
        task1_turns: t1.len(),
        task2_turns: t2.len(),
        failed_conversations: conversations.iter().filter(|c| c.error.is_some()).count(),
    }
}

/// Markdown table with one row per report, columns Task3 | Task1 | Task2.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let mut out = String::from("| System | Task3 | Task1 | Task2 |\n|---|---|---|---|\n");
    for r in reports {
        let a = &r.aggregates;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.config.system,
            cell(a.task3),
            cell(a.task1),
            cell(a.task2)
        );
    }
    out
}
