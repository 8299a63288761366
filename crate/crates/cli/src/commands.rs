//! Subcommand implementations. Each returns a `CliError` instead of
//! printing it so the binary decides how failures are reported.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use npc_dialogue::backend::{BackendConfig, Generator};
use npc_dialogue::context::{load_dataset, parse_dataset, read_dataset_text, save_dataset, validate_conversation, Conversation};
use npc_dialogue::eval::{render_table, run_eval, EvalReport};
use npc_dialogue::fusion::{average_checkpoints, check_compatible, read_checkpoint, FusionPlan};
use npc_dialogue::prompt::PromptScenario;
use npc_dialogue::registry::Registry;
use npc_dialogue::router::{write_trace, RunSettings, Session, TurnOutcome};
use npc_dialogue::synthesis::{
    emit_training_examples, synthesize, write_training_examples, ExampleSource, Strategy, SynthScenario, SynthesisJob,
};
use serde_json::json;

use crate::error::CliError;

pub fn load_settings(path: Option<&Path>) -> Result<RunSettings, CliError> {
    let Some(path) = path else {
        return Ok(RunSettings::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::new("settings", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("settings", format!("{}: {e}", path.display())))
}

pub fn load_backend(path: &Path) -> Result<Arc<dyn Generator>, CliError> {
    Ok(BackendConfig::load(path)?.build()?.generator())
}

pub fn find_conversation(dataset: &[Conversation], id: &str) -> Result<Conversation, CliError> {
    dataset.iter().find(|c| c.id == id).cloned().ok_or_else(|| {
        let available: Vec<&str> = dataset.iter().map(|c| c.id.as_str()).collect();
        CliError::new(
            "unknown_conversation",
            format!("no conversation {id:?}; available: {}", available.join(", ")),
        )
        .with_details(json!({ "available": available }))
    })
}

pub struct ChatArgs<'a> {
    pub dataset: &'a Path,
    pub registry: &'a Path,
    pub backend: &'a Path,
    pub conversation: &'a str,
    pub settings: Option<&'a Path>,
    pub trace: bool,
    pub trace_file: Option<&'a Path>,
}

fn print_trace<W: Write>(out: &mut W, outcome: &TurnOutcome) -> std::io::Result<()> {
    for rejected in &outcome.rejected_calls {
        writeln!(
            out,
            "  [rejected] {} {} ({})",
            rejected.call.name,
            serde_json::Value::Object(rejected.call.parameters.clone()),
            rejected.report
        )?;
    }
    for result in &outcome.results {
        let status = serde_json::to_value(result.status).unwrap_or_default();
        writeln!(
            out,
            "  [call] {} {} -> {}",
            result.call.name,
            serde_json::Value::Object(result.call.parameters.clone()),
            status.as_str().unwrap_or_default()
        )?;
    }
    for finding in &outcome.parse_diagnostics.findings {
        writeln!(out, "  [parse] {}", finding.detail)?;
    }
    Ok(())
}

/// Reads player lines from `input` until EOF and prints NPC replies.
/// Blank lines are skipped. Starts from the conversation's background with
/// an empty history.
pub fn cmd_chat<R: BufRead, W: Write>(args: &ChatArgs<'_>, input: R, mut out: W) -> Result<(), CliError> {
    let dataset = load_dataset(args.dataset)?;
    let registry = Arc::new(Registry::load(args.registry)?);
    let backend = load_backend(args.backend)?;
    let settings = load_settings(args.settings)?;
    let mut conv = find_conversation(&dataset, args.conversation)?;
    conv.turns.clear();
    let persona = &conv.background.persona;
    writeln!(out, "# {} ({}) at {}", persona.name, persona.occupation, conv.background.state.location)?;
    let mut session =
        Session::new(conv, backend, registry, settings).map_err(|e| CliError::new("session", e))?;
    let mut trace_writer = match args.trace_file {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };

    for line in input.lines() {
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        match session.run_turn(query) {
            Ok(outcome) => {
                if args.trace {
                    print_trace(&mut out, &outcome)?;
                }
                writeln!(out, "NPC: {}", outcome.response)?;
                if let Some(w) = trace_writer.as_mut() {
                    write_trace(&mut *w, std::slice::from_ref(&outcome))?;
                }
            }
            // a failed turn leaves the session untouched; keep the loop alive
            Err(err) => writeln!(out, "! turn failed: {err}")?,
        }
        out.flush()?;
    }
    if let Some(mut w) = trace_writer {
        w.flush()?;
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub dataset: &'a Path,
    pub registry: &'a Path,
    pub backend: &'a Path,
    pub settings: Option<&'a Path>,
    pub system: &'a str,
    pub out: &'a Path,
}

pub fn cmd_eval(args: &EvalArgs<'_>) -> Result<EvalReport, CliError> {
    let dataset = load_dataset(args.dataset)?;
    let registry = Arc::new(Registry::load(args.registry)?);
    let backend = load_backend(args.backend)?;
    let settings = load_settings(args.settings)?;
    let report = run_eval(args.system, &dataset, backend, registry, &settings);
    report.write(args.out)?;
    Ok(report)
}

pub fn eval_summary(report: &EvalReport) -> String {
    render_table(&[report])
}

pub fn cmd_fuse(inputs: Vec<PathBuf>, weights: Option<Vec<f64>>, output: PathBuf) -> Result<serde_json::Value, CliError> {
    let mut warnings: Vec<serde_json::Value> = Vec::new();
    if inputs.len() > 1 {
        let ckpts = inputs
            .iter()
            .map(|p| read_checkpoint(p).map_err(|e| CliError::new("checkpoint", format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        let report = check_compatible(&ckpts);
        warnings = report.warnings().map(|w| json!(w)).collect();
    }
    let plan = FusionPlan {
        inputs,
        weights,
        output,
    };
    let fused = average_checkpoints(&plan)?;
    Ok(json!({
        "output": plan.output.display().to_string(),
        "inputs": plan.inputs.len(),
        "tensors": fused.tensors.len(),
        "warnings": warnings,
    }))
}

pub struct SynthArgs<'a> {
    pub dataset: &'a Path,
    pub backend: &'a Path,
    pub strategy: Strategy,
    pub scenario: SynthScenario,
    pub out: &'a Path,
    pub examples: Option<(&'a Path, &'a Path)>,
}

/// Writes the regenerated dataset (and optionally training examples).
/// Conversations that failed are left out and listed in the summary; the
/// command then fails after writing what succeeded.
pub fn cmd_synth(args: &SynthArgs<'_>) -> Result<serde_json::Value, CliError> {
    let dataset = load_dataset(args.dataset)?;
    let config = BackendConfig::load(args.backend)?;
    let built = config.build()?;
    let backend = built.generator();
    let model = backend.model_name(args.scenario_adapter());
    let job = SynthesisJob {
        scenario: args.scenario,
        ..SynthesisJob::new(args.strategy)
    };
    let output = synthesize(&job, &dataset, backend)?;
    save_dataset(args.out, &output.conversations)?;

    let mut examples_written = None;
    if let Some((registry_path, examples_path)) = args.examples {
        let registry = Registry::load(registry_path)?;
        let scenario = match args.scenario {
            SynthScenario::WithoutResults => PromptScenario::WithoutResults,
            SynthScenario::WithResults => PromptScenario::WithResults,
        };
        let source = ExampleSource {
            strategy: Some(args.strategy),
            backend_model: model,
        };
        let examples = emit_training_examples(&output.conversations, scenario, &registry, &source)?;
        let mut writer = BufWriter::new(File::create(examples_path)?);
        write_training_examples(&mut writer, &examples)?;
        writer.flush()?;
        examples_written = Some(examples.len());
    }

    let failures: Vec<String> = output.failures.iter().map(ToString::to_string).collect();
    let summary = json!({
        "output": args.out.display().to_string(),
        "strategy": args.strategy,
        "conversations": output.conversations.len(),
        "examples": examples_written,
        "failures": failures,
    });
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::new("synthesis", format!("{} conversation(s) failed", failures.len())).with_details(summary))
    }
}

impl SynthArgs<'_> {
    fn scenario_adapter(&self) -> npc_dialogue::backend::AdapterId {
        match self.scenario {
            SynthScenario::WithoutResults => npc_dialogue::backend::AdapterId::DialogueWithoutResults,
            SynthScenario::WithResults => npc_dialogue::backend::AdapterId::DialogueWithResults,
        }
    }
}

/// Reports every invariant violation in the dataset, not just the first.
pub fn cmd_validate(dataset: &Path, registry: &Path) -> Result<serde_json::Value, CliError> {
    let registry = Registry::load(registry)?;
    let conversations = parse_dataset(&read_dataset_text(dataset)?)?;
    let findings: Vec<_> = conversations
        .iter()
        .flat_map(|c| validate_conversation(c, &registry).findings)
        .collect();
    if findings.is_empty() {
        Ok(json!({ "valid": true, "conversations": conversations.len() }))
    } else {
        let messages: Vec<String> = findings.iter().map(ToString::to_string).collect();
        Err(
            CliError::new("validation", format!("{} finding(s)", findings.len()))
                .with_details(json!({ "findings": findings, "messages": messages })),
        )
    }
}
