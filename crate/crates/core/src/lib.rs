//! Tool-augmented NPC dialogue: game context, function registries, Hermes
//! tool-call codec, prompt assembly, scenario routing over three LoRA
//! adapters, adapter averaging, dialogue synthesis and offline evaluation.

pub mod backend;
pub mod codec;
pub mod context;
pub mod eval;
pub mod fusion;
pub mod prompt;
pub mod registry;
pub mod router;
pub mod synthesis;
