//! Hermes-style tool-call wire format.
//!
//! Function signatures are offered to the model inside a `<tools>` block, one
//! JSON object per line, and the model answers with zero or more
//! `<tool_call>` regions each holding `{"name": ..., "parameters": {...}}`.
//! Parsing is total: malformed regions turn into [`ParseFinding`]s.

use std::io;

use serde_json::ser::Formatter;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::registry::{FunctionList, FunctionSpec, ToolResult};

pub const TOOLS_OPEN: &str = "<tools>";
pub const TOOLS_CLOSE: &str = "</tools>";
pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";

/// A function invocation requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(alias = "arguments", default)]
    pub parameters: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, parameters: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            parameters,
        }
    }

    /// Builds a call from a `json!({...})` literal. Non-object values yield an
    /// empty parameter map.
    pub fn from_json(name: impl Into<String>, parameters: Value) -> Self {
        let parameters = match parameters {
            Value::Object(map) => map,
            _ => Map::new(),
        };
        Self::new(name, parameters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    UnclosedTag,
    InvalidJson,
    MissingName,
    NonObjectParams,
    StrayText,
}

/// One malformed or unexpected region. `span` is a half-open range of
/// character (not byte) offsets into the parsed text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFinding {
    pub kind: FindingKind,
    pub span: (usize, usize),
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub findings: Vec<ParseFinding>,
}

impl ParseDiagnostics {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }
}

/// Renders the `<tools>` block for a function list, one compact JSON
/// signature per line in list order.
pub fn render_tools_block(list: &FunctionList) -> String {
    let mut out = String::from(TOOLS_OPEN);
    out.push('\n');
    for function in &list.functions {
        out.push_str(&function_signature(function).to_string());
        out.push('\n');
    }
    out.push_str(TOOLS_CLOSE);
    out
}

fn function_signature(function: &FunctionSpec) -> Value {
    let mut properties = Map::new();
    for (name, param) in &function.parameters.properties {
        let mut descriptor = Map::new();
        descriptor.insert("type".into(), Value::String(param.param_type.as_str().into()));
        descriptor.insert("description".into(), Value::String(param.description.clone()));
        if let Some(values) = &param.enum_values {
            descriptor.insert("enum".into(), Value::Array(values.clone()));
        }
        properties.insert(name.clone(), Value::Object(descriptor));
    }
    let required = function
        .parameters
        .required
        .iter()
        .cloned()
        .map(Value::String)
        .collect();

    let mut parameters = Map::new();
    parameters.insert("type".into(), Value::String("object".into()));
    parameters.insert("properties".into(), Value::Object(properties));
    parameters.insert("required".into(), Value::Array(required));

    let mut inner = Map::new();
    inner.insert("name".into(), Value::String(function.name.clone()));
    inner.insert("description".into(), Value::String(function.description.clone()));
    inner.insert("parameters".into(), Value::Object(parameters));

    let mut outer = Map::new();
    outer.insert("type".into(), Value::String("function".into()));
    outer.insert("function".into(), Value::Object(inner));
    Value::Object(outer)
}

/// `json.dumps`-style separators: `", "` between items and `": "` after keys.
struct SpacedFormatter;

impl Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        writer.write_all(b": ")
    }
}

fn to_spaced_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SpacedFormatter);
    value
        .serialize(&mut ser)
        .expect("serializing JSON values into memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Emits the exact tagged form of a single call.
pub fn render_tool_call(call: &ToolCall) -> String {
    format!(
        "{TOOL_CALL_OPEN}\n{}\n{TOOL_CALL_CLOSE}",
        to_spaced_json(call)
    )
}

/// Renders several calls separated by newlines; an empty slice renders as "".
pub fn render_tool_calls(calls: &[ToolCall]) -> String {
    calls.iter().map(render_tool_call).collect::<Vec<_>>().join("\n")
}

#[derive(Serialize)]
struct ResultLine<'a> {
    name: &'a str,
    status: crate::registry::ToolStatus,
    payload: &'a Value,
}

/// One compact JSON object per result, newline separated.
pub fn render_tool_results(results: &[ToolResult]) -> String {
    results
        .iter()
        .map(|result| {
            serde_json::to_string(&ResultLine {
                name: &result.call.name,
                status: result.status,
                payload: &result.payload,
            })
            .expect("tool results always serialize")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts every well-formed `<tool_call>` region from model output.
pub fn parse_tool_calls(text: &str) -> (Vec<ToolCall>, ParseDiagnostics) {
    let mut calls = Vec::new();
    let mut findings = Vec::new();
    // byte ranges of text outside any region
    let mut outside: Vec<(usize, usize)> = Vec::new();
    let mut saw_region = false;
    let mut pos = 0;

    while let Some(rel) = text[pos..].find(TOOL_CALL_OPEN) {
        saw_region = true;
        let open = pos + rel;
        outside.push((pos, open));
        let body_start = open + TOOL_CALL_OPEN.len();

        if let Some((value, close_end)) = scan_json_region(text, body_start) {
            match interpret(value) {
                Ok(call) => calls.push(call),
                Err((kind, detail)) => findings.push(finding(text, kind, open, close_end, detail)),
            }
            pos = close_end;
            continue;
        }

        let Some(close_rel) = text[body_start..].find(TOOL_CALL_CLOSE) else {
            findings.push(finding(
                text,
                FindingKind::UnclosedTag,
                open,
                text.len(),
                "missing </tool_call>".into(),
            ));
            pos = text.len();
            break;
        };
        let close = body_start + close_rel;
        let close_end = close + TOOL_CALL_CLOSE.len();
        match serde_json::from_str::<Value>(text[body_start..close].trim()) {
            Ok(value) => match interpret(value) {
                Ok(call) => calls.push(call),
                Err((kind, detail)) => findings.push(finding(text, kind, open, close_end, detail)),
            },
            Err(err) => findings.push(finding(
                text,
                FindingKind::InvalidJson,
                open,
                close_end,
                err.to_string(),
            )),
        }
        pos = close_end;
    }
    outside.push((pos, text.len()));

    if saw_region {
        for (start, end) in outside {
            let segment = &text[start..end];
            if segment.trim().is_empty() {
                continue;
            }
            let lead = segment.len() - segment.trim_start().len();
            let trail = segment.len() - segment.trim_end().len();
            findings.push(finding(
                text,
                FindingKind::StrayText,
                start + lead,
                end - trail,
                "text outside <tool_call> regions".into(),
            ));
        }
        findings.sort_by_key(|f| f.span.0);
    }

    (calls, ParseDiagnostics { findings })
}

/// Reads exactly one JSON value right after the opening tag and requires the
/// closing tag to follow it. Handles string values that themselves contain
/// the closing tag. Returns the value and the byte offset past the close tag.
fn scan_json_region(text: &str, body_start: usize) -> Option<(Value, usize)> {
    let body = &text[body_start..];
    let lead = body.len() - body.trim_start().len();
    if !body[lead..].starts_with('{') {
        return None;
    }
    let mut stream = serde_json::Deserializer::from_str(&body[lead..]).into_iter::<Value>();
    let value = stream.next()?.ok()?;
    let after = body_start + lead + stream.byte_offset();
    let rest = &text[after..];
    let gap = rest.len() - rest.trim_start().len();
    if rest[gap..].starts_with(TOOL_CALL_CLOSE) {
        Some((value, after + gap + TOOL_CALL_CLOSE.len()))
    } else {
        None
    }
}

fn interpret(value: Value) -> Result<ToolCall, (FindingKind, String)> {
    let Value::Object(mut object) = value else {
        return Err((FindingKind::InvalidJson, "body is not a JSON object".into()));
    };
    let name = match object.remove("name") {
        Some(Value::String(name)) if !name.is_empty() => name,
        Some(Value::String(_)) => return Err((FindingKind::MissingName, "empty \"name\"".into())),
        Some(_) => return Err((FindingKind::MissingName, "\"name\" is not a string".into())),
        None => return Err((FindingKind::MissingName, "no \"name\" key".into())),
    };
    let params = object.remove("parameters").or_else(|| object.remove("arguments"));
    match params {
        Some(Value::Object(parameters)) => Ok(ToolCall { name, parameters }),
        Some(other) => Err((
            FindingKind::NonObjectParams,
            format!("parameters must be an object, found {}", json_type_name(&other)),
        )),
        None => Err((
            FindingKind::NonObjectParams,
            "no \"parameters\" or \"arguments\" key".into(),
        )),
    }
}

pub(crate) fn json_type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn finding(text: &str, kind: FindingKind, start: usize, end: usize, detail: String) -> ParseFinding {
    ParseFinding {
        kind,
        span: (char_offset(text, start), char_offset(text, end)),
        detail,
    }
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}
