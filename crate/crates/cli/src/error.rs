use std::fmt;

use serde::Serialize;
use serde_json::{json, Value};

/// A command failure, printed to stderr as one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! from_error {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::new($kind, err)
            }
        }
    };
}

from_error!(npc_dialogue::context::DatasetError, "dataset");
from_error!(npc_dialogue::registry::RegistryError, "registry");
from_error!(npc_dialogue::backend::ProfileError, "backend_profile");
from_error!(npc_dialogue::fusion::FusionError, "fusion");
from_error!(npc_dialogue::synthesis::SynthesisError, "synthesis");
from_error!(std::io::Error, "io");
