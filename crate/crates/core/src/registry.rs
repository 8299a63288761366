//! Function lists keyed by `function_list_id`, argument validation, and
//! deterministic simulated execution of calls against a conversation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::codec::{json_type_name, ToolCall};
use crate::context::Conversation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    /// In-game action performed by the NPC (e.g. selling an item).
    Action,
    /// Information lookup (item attributes, prices).
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Array,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::Array => "array",
        }
    }

    pub fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Number => value.is_number(),
            ParamType::Integer => match value {
                Value::Number(n) => {
                    n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
                }
                _ => false,
            },
            ParamType::Boolean => value.is_boolean(),
            ParamType::Array => value.is_array(),
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "enum", alias = "enum_values", default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<Value>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSchema {
    #[serde(default)]
    pub properties: IndexMap<String, ParamSpec>,
    #[serde(default)]
    pub required: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub kind: FunctionKind,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: ParameterSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionList {
    pub id: String,
    pub functions: Vec<FunctionSpec>,
}

impl FunctionList {
    pub fn get(&self, name: &str) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    NotFound,
    InvalidArgs,
}

/// Outcome of executing one call. `payload` is never null when status is ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call: ToolCall,
    pub status: ToolStatus,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("failed to read registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed registry at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("duplicate function list id {0:?}")]
    DuplicateListId(String),
    #[error("duplicate function {function:?} in list {list:?}")]
    DuplicateFunction { list: String, function: String },
    #[error("malformed schema for {list}/{function}: {detail}")]
    MalformedSchema {
        list: String,
        function: String,
        detail: String,
    },
    #[error("unknown function list id {0:?}")]
    UnknownList(String),
}

/// Calling `execute_tool` with a call that does not validate.
#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("call to {name:?} is not valid for list {list:?}: {findings}")]
    InvalidCall {
        name: String,
        list: String,
        findings: CallReport,
    },
}

/// All function lists, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    lists: IndexMap<String, FunctionList>,
}

impl Registry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: display.clone(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|err| match err {
            RegistryError::Parse { message, .. } => RegistryError::Parse {
                path: display,
                message,
            },
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, RegistryError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let lists: Vec<FunctionList> =
            serde_path_to_error::deserialize(de).map_err(|err| RegistryError::Parse {
                path: "<memory>".into(),
                message: format!("{} at {}", err.inner(), err.path()),
            })?;
        Self::from_lists(lists)
    }

    pub fn from_lists(lists: Vec<FunctionList>) -> Result<Self, RegistryError> {
        let mut index = IndexMap::with_capacity(lists.len());
        for list in lists {
            check_list(&list)?;
            if index.contains_key(&list.id) {
                return Err(RegistryError::DuplicateListId(list.id));
            }
            index.insert(list.id.clone(), list);
        }
        Ok(Self { lists: index })
    }

    pub fn lookup(&self, function_list_id: &str) -> Result<&FunctionList, RegistryError> {
        self.lists
            .get(function_list_id)
            .ok_or_else(|| RegistryError::UnknownList(function_list_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn lists(&self) -> impl Iterator<Item = &FunctionList> {
        self.lists.values()
    }

    /// Runs a validated call against the conversation's game context.
    ///
    /// Tool functions look the item up in `knowledge_info` by
    /// case-insensitive name, trying string arguments in schema order.
    /// Action functions acknowledge by echoing the function name and
    /// arguments. The result depends only on `(call, conv)`.
    pub fn execute_tool(&self, call: &ToolCall, conv: &Conversation) -> Result<ToolResult, ExecuteError> {
        let list = self.lookup(&conv.function_list_id)?;
        let report = validate_call(call, list, Strictness::Lenient);
        if !report.is_valid() {
            return Err(ExecuteError::InvalidCall {
                name: call.name.clone(),
                list: list.id.clone(),
                findings: report,
            });
        }
        let spec = list.get(&call.name).expect("validated calls name a known function");
        Ok(match spec.kind {
            FunctionKind::Action => acknowledge(call),
            FunctionKind::Tool => lookup_item(spec, call, conv),
        })
    }
}

fn check_list(list: &FunctionList) -> Result<(), RegistryError> {
    let mut seen = HashSet::new();
    for function in &list.functions {
        let malformed = |detail: String| RegistryError::MalformedSchema {
            list: list.id.clone(),
            function: function.name.clone(),
            detail,
        };
        if function.name.is_empty() {
            return Err(malformed("empty function name".into()));
        }
        if !seen.insert(function.name.as_str()) {
            return Err(RegistryError::DuplicateFunction {
                list: list.id.clone(),
                function: function.name.clone(),
            });
        }
        for required in &function.parameters.required {
            if !function.parameters.properties.contains_key(required) {
                return Err(malformed(format!("required parameter {required:?} is not declared")));
            }
        }
        for (name, param) in &function.parameters.properties {
            if let Some(values) = &param.enum_values {
                if let Some(bad) = values.iter().find(|v| !param.param_type.accepts(v)) {
                    return Err(malformed(format!(
                        "enum value {bad} of {name:?} is not a {}",
                        param.param_type
                    )));
                }
            }
        }
    }
    Ok(())
}

fn acknowledge(call: &ToolCall) -> ToolResult {
    let mut payload = Map::new();
    payload.insert("action".into(), Value::String(call.name.clone()));
    for (key, value) in &call.parameters {
        if key != "action" {
            payload.insert(key.clone(), value.clone());
        }
    }
    ToolResult {
        call: call.clone(),
        status: ToolStatus::Ok,
        payload: Value::Object(payload),
    }
}

fn lookup_item(spec: &FunctionSpec, call: &ToolCall, conv: &Conversation) -> ToolResult {
    let candidates: Vec<&str> = spec
        .parameters
        .properties
        .keys()
        .filter_map(|key| call.parameters.get(key))
        .filter_map(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if candidates.is_empty() {
        return ToolResult {
            call: call.clone(),
            status: ToolStatus::InvalidArgs,
            payload: Value::Null,
        };
    }
    let items = &conv.background.knowledge.knowledge_info;
    let hit = candidates.iter().find_map(|wanted| {
        let wanted = wanted.to_lowercase();
        items.iter().find(|item| item.name.to_lowercase() == wanted)
    });
    match hit {
        Some(item) => ToolResult {
            call: call.clone(),
            status: ToolStatus::Ok,
            payload: serde_json::to_value(item).expect("item knowledge serializes"),
        },
        None => ToolResult {
            call: call.clone(),
            status: ToolStatus::NotFound,
            payload: Value::Null,
        },
    }
}

/// Lenient mode reports unknown arguments without rejecting the call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CallFinding {
    UnknownFunction { name: String },
    MissingRequired { param: String },
    TypeMismatch { param: String, expected: ParamType, found: String },
    NotInEnum { param: String, value: Value },
    UnknownParam { param: String, blocking: bool },
}

impl CallFinding {
    pub fn is_blocking(&self) -> bool {
        match self {
            CallFinding::UnknownParam { blocking, .. } => *blocking,
            _ => true,
        }
    }
}

impl fmt::Display for CallFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallFinding::UnknownFunction { name } => write!(f, "unknown function: {name}"),
            CallFinding::MissingRequired { param } => write!(f, "missing required: {param}"),
            CallFinding::TypeMismatch { param, expected, found } => {
                write!(f, "type mismatch: {param} expected {expected}, found {found}")
            }
            CallFinding::NotInEnum { param, value } => write!(f, "not in enum: {param}={value}"),
            CallFinding::UnknownParam { param, .. } => write!(f, "unknown param: {param}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallReport {
    pub findings: Vec<CallFinding>,
}

impl CallReport {
    /// A call is valid when none of its findings block it.
    pub fn is_valid(&self) -> bool {
        !self.findings.iter().any(CallFinding::is_blocking)
    }
}

impl fmt::Display for CallReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.findings.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_call(call: &ToolCall, list: &FunctionList, strictness: Strictness) -> CallReport {
    let Some(spec) = list.get(&call.name) else {
        return CallReport {
            findings: vec![CallFinding::UnknownFunction {
                name: call.name.clone(),
            }],
        };
    };
    let schema = &spec.parameters;
    let mut findings = Vec::new();
    for required in &schema.required {
        if !call.parameters.contains_key(required) {
            findings.push(CallFinding::MissingRequired {
                param: required.clone(),
            });
        }
    }
    for (name, value) in &call.parameters {
        let Some(param) = schema.properties.get(name) else {
            findings.push(CallFinding::UnknownParam {
                param: name.clone(),
                blocking: strictness == Strictness::Strict,
            });
            continue;
        };
        if !param.param_type.accepts(value) {
            findings.push(CallFinding::TypeMismatch {
                param: name.clone(),
                expected: param.param_type,
                found: json_type_name(value).into(),
            });
        } else if let Some(allowed) = &param.enum_values {
            if !allowed.contains(value) {
                findings.push(CallFinding::NotInEnum {
                    param: name.clone(),
                    value: value.clone(),
                });
            }
        }
    }
    CallReport { findings }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::context::tests::sample_conversation;
    use serde_json::json;

    const REGISTRY: &str = r#"[
      {"id": "fl_a", "functions": [
        {"name": "sell", "kind": "action", "description": "Sell an item",
         "parameters": {"properties": {
            "item": {"type": "string", "description": "item name"},
            "quantity": {"type": "integer", "description": "how many"}},
          "required": ["item"]}},
        {"name": "get_item_info", "kind": "tool", "description": "Look up an item",
         "parameters": {"properties": {"item": {"type": "string"}}, "required": ["item"]}},
        {"name": "open_shop", "kind": "action", "parameters": {"properties": {
            "mode": {"type": "string", "enum": ["buy", "repair"]}}, "required": []}}
      ]},
      {"id": "fl_b", "functions": []}
    ]"#;

    pub(crate) fn sample_registry() -> Registry {
        Registry::from_json_str(REGISTRY).unwrap()
    }

    fn registry() -> Registry {
        sample_registry()
    }

    fn fl_a(reg: &Registry) -> &FunctionList {
        reg.lookup("fl_a").unwrap()
    }

    #[test]
    fn loads_two_lists() {
        let reg = registry();
        assert_eq!(reg.len(), 2);
        assert_eq!(fl_a(&reg).get("sell").unwrap().kind, FunctionKind::Action);
    }

    #[test]
    fn lookup_unknown_and_empty_ids() {
        let reg = registry();
        assert!(matches!(reg.lookup(""), Err(RegistryError::UnknownList(id)) if id.is_empty()));
        assert!(reg.lookup("fl_999").is_err());
    }

    #[test]
    fn duplicate_function_rejected() {
        let text = r#"[{"id": "x", "functions": [
            {"name": "sell", "kind": "action"}, {"name": "sell", "kind": "action"}]}]"#;
        assert!(matches!(
            Registry::from_json_str(text),
            Err(RegistryError::DuplicateFunction { .. })
        ));
    }

    #[test]
    fn duplicate_list_rejected() {
        let text = r#"[{"id": "x", "functions": []}, {"id": "x", "functions": []}]"#;
        assert!(matches!(Registry::from_json_str(text), Err(RegistryError::DuplicateListId(_))));
    }

    #[test]
    fn malformed_schemas_rejected() {
        let undeclared = r#"[{"id": "x", "functions": [{"name": "f", "kind": "tool",
            "parameters": {"properties": {}, "required": ["ghost"]}}]}]"#;
        assert!(matches!(
            Registry::from_json_str(undeclared),
            Err(RegistryError::MalformedSchema { .. })
        ));
        let bad_kind = r#"[{"id": "x", "functions": [{"name": "f", "kind": "spell"}]}]"#;
        let err = Registry::from_json_str(bad_kind).unwrap_err().to_string();
        assert!(err.contains("functions[0].kind"), "{err}");
        let bad_type = r#"[{"id": "x", "functions": [{"name": "f", "kind": "tool",
            "parameters": {"properties": {"a": {"type": "object"}}}}]}]"#;
        assert!(Registry::from_json_str(bad_type).is_err());
    }

    #[test]
    fn valid_sell_call() {
        let reg = registry();
        let call = ToolCall::from_json("sell", json!({"item": "Iron Sword", "quantity": 2}));
        let report = validate_call(&call, fl_a(&reg), Strictness::Lenient);
        assert!(report.findings.is_empty());
        assert!(report.is_valid());
    }

    #[test]
    fn missing_required_param() {
        let reg = registry();
        let report = validate_call(&ToolCall::from_json("sell", json!({})), fl_a(&reg), Strictness::Lenient);
        assert_eq!(report.to_string(), "missing required: item");
        assert!(!report.is_valid());
    }

    #[test]
    fn unknown_function() {
        let reg = registry();
        let report = validate_call(
            &ToolCall::from_json("enchant", json!({"item": "x"})),
            fl_a(&reg),
            Strictness::Lenient,
        );
        assert_eq!(report.to_string(), "unknown function: enchant");
    }

    #[test]
    fn type_mismatch_and_enum() {
        let reg = registry();
        let list = fl_a(&reg);
        let report = validate_call(
            &ToolCall::from_json("sell", json!({"item": 3, "quantity": 1.5})),
            list,
            Strictness::Lenient,
        );
        assert_eq!(report.findings.len(), 2);
        assert!(validate_call(
            &ToolCall::from_json("sell", json!({"item": "a", "quantity": 2.0})),
            list,
            Strictness::Lenient
        )
        .is_valid());
        let report = validate_call(
            &ToolCall::from_json("open_shop", json!({"mode": "steal"})),
            list,
            Strictness::Lenient,
        );
        assert!(matches!(report.findings[0], CallFinding::NotInEnum { .. }));
    }

    #[test]
    fn unknown_param_lenient_vs_strict() {
        let reg = registry();
        let call = ToolCall::from_json("sell", json!({"item": "a", "discount": true}));
        let lenient = validate_call(&call, fl_a(&reg), Strictness::Lenient);
        assert_eq!(lenient.findings.len(), 1);
        assert!(lenient.is_valid());
        assert!(!validate_call(&call, fl_a(&reg), Strictness::Strict).is_valid());
    }

    #[test]
    fn tool_lookup_hits_item_case_insensitively() {
        let reg = registry();
        let conv = sample_conversation();
        let result = reg
            .execute_tool(&ToolCall::from_json("get_item_info", json!({"item": "iron sword"})), &conv)
            .unwrap();
        assert_eq!(result.status, ToolStatus::Ok);
        assert_eq!(result.payload["name"], json!("Iron Sword"));
        assert_eq!(
            result.payload,
            serde_json::to_value(&conv.background.knowledge.knowledge_info[0]).unwrap()
        );
    }

    #[test]
    fn tool_lookup_miss() {
        let reg = registry();
        let result = reg
            .execute_tool(
                &ToolCall::from_json("get_item_info", json!({"item": "Nonexistent Blade"})),
                &sample_conversation(),
            )
            .unwrap();
        assert_eq!(result.status, ToolStatus::NotFound);
        assert!(result.payload.is_null());
    }

    #[test]
    fn blank_lookup_argument_is_invalid_args() {
        let reg = registry();
        let result = reg
            .execute_tool(&ToolCall::from_json("get_item_info", json!({"item": "  "})), &sample_conversation())
            .unwrap();
        assert_eq!(result.status, ToolStatus::InvalidArgs);
    }

    #[test]
    fn action_echoes_arguments() {
        let reg = registry();
        let call = ToolCall::from_json("sell", json!({"item": "Iron Sword", "quantity": 1}));
        let result = reg.execute_tool(&call, &sample_conversation()).unwrap();
        assert_eq!(result.status, ToolStatus::Ok);
        assert_eq!(
            serde_json::to_string(&result.payload).unwrap(),
            r#"{"action":"sell","item":"Iron Sword","quantity":1}"#
        );
    }

    #[test]
    fn invalid_call_is_contract_error() {
        let reg = registry();
        let err = reg
            .execute_tool(&ToolCall::from_json("sell", json!({})), &sample_conversation())
            .unwrap_err();
        assert!(matches!(err, ExecuteError::InvalidCall { .. }));
    }

    #[test]
    fn execution_is_deterministic() {
        let reg = registry();
        let conv = sample_conversation();
        let call = ToolCall::from_json("get_item_info", json!({"item": "Oak Shield"}));
        let a = reg.execute_tool(&call, &conv).unwrap();
        let b = reg.execute_tool(&call, &conv).unwrap();
        assert_eq!(a, b);
    }
}
