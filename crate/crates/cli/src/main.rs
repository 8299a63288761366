use std::io::{self, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use npc_dialogue::synthesis::{Strategy, SynthScenario};
use npc_dialogue_cli::commands::{self, ChatArgs, EvalArgs, SynthArgs};
use npc_dialogue_cli::service::{self, ServiceConfig};
use npc_dialogue_cli::CliError;

#[derive(Parser)]
#[command(name = "npcd", version, about = "Tool-augmented NPC dialogue pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// Backend profile JSON (`{"kind": "openai", ...}` or `{"kind": "mock", ...}`).
    #[arg(long)]
    backend: PathBuf,
    /// Optional run settings JSON.
    #[arg(long)]
    settings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    SequentialReplace,
    WholeHistory,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    WithoutResults,
    WithResults,
}

#[derive(Subcommand)]
enum Command {
    /// Play the player role against one conversation's NPC.
    Chat {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        conversation: String,
        /// Print tool calls and their statuses before each reply.
        #[arg(long)]
        trace: bool,
        /// Append every TurnOutcome to this JSONL file.
        #[arg(long)]
        trace_file: Option<PathBuf>,
    },
    /// Replay a dataset and write a scored report.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "npcd")]
        system: String,
    },
    /// Average LoRA adapter checkpoints.
    Fuse {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Comma-separated weights summing to 1; uniform when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate NPC turns of a dataset through a backend.
    Synth {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long, value_enum, default_value = "sequential-replace")]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value = "without-results")]
        scenario: ScenarioArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write training examples (JSONL); needs --registry.
        #[arg(long, requires = "registry")]
        examples: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Check a dataset against its invariants and the registry.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the listen address from the config file.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("values serialize"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Chat {
            data,
            conversation,
            trace,
            trace_file,
        } => {
            let args = ChatArgs {
                dataset: &data.dataset,
                registry: &data.registry,
                backend: &data.backend,
                conversation: &conversation,
                settings: data.settings.as_deref(),
                trace,
                trace_file: trace_file.as_deref(),
            };
            let stdin = io::stdin();
            if stdin.is_terminal() {
                eprintln!("type a line and press enter; Ctrl-D quits");
            }
            commands::cmd_chat(&args, stdin.lock(), io::stdout().lock())
        }
        Command::Eval { data, out, system } => {
            let args = EvalArgs {
                dataset: &data.dataset,
                registry: &data.registry,
                backend: &data.backend,
                settings: data.settings.as_deref(),
                system: &system,
                out: &out,
            };
            let report = commands::cmd_eval(&args)?;
            print!("{}", commands::eval_summary(&report));
            Ok(())
        }
        Command::Fuse { inputs, weights, out } => print_json(&commands::cmd_fuse(inputs, weights, out)?),
        Command::Synth {
            dataset,
            backend,
            strategy,
            scenario,
            out,
            examples,
            registry,
        } => {
            let strategy = match strategy {
                StrategyArg::SequentialReplace => Strategy::SequentialReplace,
                StrategyArg::WholeHistory => Strategy::WholeHistory,
            };
            let scenario = match scenario {
                ScenarioArg::WithoutResults => SynthScenario::WithoutResults,
                ScenarioArg::WithResults => SynthScenario::WithResults,
            };
            let args = SynthArgs {
                dataset: &dataset,
                backend: &backend,
                strategy,
                scenario,
                out: &out,
                examples: registry.as_deref().zip(examples.as_deref()),
            };
            print_json(&commands::cmd_synth(&args)?)
        }
        Command::Validate { dataset, registry } => print_json(&commands::cmd_validate(&dataset, &registry)?),
        Command::Serve { config, listen } => {
            let mut config = ServiceConfig::load(&config)?;
            if let Some(listen) = listen {
                config.listen = listen;
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(config))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}
