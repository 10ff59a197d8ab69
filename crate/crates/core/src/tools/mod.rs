//! Custom-function bridge: tool schemas, results, the wire protocol and hosts.

mod fixture;
mod subprocess;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::ReturnStatus;

pub use fixture::{FixtureHost, HostFixture};
pub use subprocess::SubprocessHost;

pub const HANDSHAKE_TIMEOUT_MS: u64 = 5_000;
pub const CALL_TIMEOUT_MS: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolError {
    #[error("cannot start tool host: {0}")]
    Spawn(String),
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error("tool call `{0}` timed out")]
    Timeout(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("missing required argument `{arg}` for `{tool}`")]
    MissingArg { tool: String, arg: String },
}

impl ToolError {
    pub fn code(&self) -> &'static str {
        match self {
            ToolError::Spawn(_) => "E_SPAWN",
            ToolError::Handshake(_) => "E_HANDSHAKE",
            ToolError::Timeout(_) => "E_TOOL_TIMEOUT",
            ToolError::Protocol(_) => "E_TOOL_PROTOCOL",
            ToolError::BadSchema(_) => "E_BAD_SCHEMA",
            ToolError::UnknownTool(_) => "E_UNKNOWN_TOOL",
            ToolError::MissingArg { .. } => "E_MISSING_ARG",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    /// JSON-schema type name.
    #[serde(rename = "type")]
    pub type_tag: String,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ToolParam>,
}

impl ToolSchema {
    /// Placeholder offered when a `uses` entry has no advertised schema.
    pub fn opaque(name: &str) -> Self {
        Self {
            name: name.to_string(),
            description: String::new(),
            parameters: Vec::new(),
        }
    }

    pub fn required(&self) -> impl Iterator<Item = &ToolParam> {
        self.parameters.iter().filter(|p| p.required)
    }

    pub fn optional(&self) -> impl Iterator<Item = &ToolParam> {
        self.parameters.iter().filter(|p| !p.required)
    }

    pub fn check_args(&self, args: &Map<String, Value>) -> Result<(), ToolError> {
        match self.required().find(|p| !args.contains_key(&p.name)) {
            Some(p) => Err(ToolError::MissingArg {
                tool: self.name.clone(),
                arg: p.name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// OpenAI-style function declaration.
    pub fn to_function_json(&self) -> Value {
        let mut props = Map::new();
        for p in &self.parameters {
            let mut prop = Map::new();
            prop.insert("type".into(), Value::String(p.type_tag.clone()));
            if let Some(d) = &p.default {
                prop.insert("default".into(), d.clone());
            }
            props.insert(p.name.clone(), Value::Object(prop));
        }
        let required: Vec<Value> = self.required().map(|p| Value::String(p.name.clone())).collect();
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {"type": "object", "properties": props, "required": required},
            }
        })
    }
}

fn normalize_type(tag: Option<&str>) -> &'static str {
    match tag.map(|t| t.trim().to_ascii_lowercase()).as_deref() {
        Some("int" | "integer") => "integer",
        Some("float" | "number") => "number",
        Some("bool" | "boolean") => "boolean",
        Some("list" | "array") => "array",
        Some("dict" | "object") => "object",
        _ => "string",
    }
}

/// Converts a host-advertised schema: `{"name", "description", "parameters": [{"name", "type", "required"?, "default"?}]}`.
/// A parameter without an explicit `required` flag is required iff it has no default.
pub fn derive_tool_schema(raw: &Value) -> Result<ToolSchema, ToolError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| ToolError::BadSchema("schema must be an object".into()))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| ToolError::BadSchema("schema needs a name".into()))?;
    let description = obj.get("description").and_then(Value::as_str).unwrap_or("");
    let mut parameters: Vec<ToolParam> = Vec::new();
    let raw_params = match obj.get("parameters") {
        None | Some(Value::Null) => &[][..],
        Some(Value::Array(items)) => items.as_slice(),
        Some(_) => return Err(ToolError::BadSchema(format!("`{name}`: parameters must be a list"))),
    };
    for p in raw_params {
        let pname = p
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| ToolError::BadSchema(format!("`{name}`: parameter without a name")))?;
        if parameters.iter().any(|q| q.name == pname) {
            return Err(ToolError::BadSchema(format!("`{name}`: duplicate parameter `{pname}`")));
        }
        let default = p.get("default").cloned();
        let required = match p.get("required") {
            Some(Value::Bool(b)) => *b,
            None => default.is_none(),
            Some(_) => return Err(ToolError::BadSchema(format!("`{name}.{pname}`: required must be a boolean"))),
        };
        if required && default.is_some() {
            return Err(ToolError::BadSchema(format!("`{name}.{pname}`: required parameter with a default")));
        }
        parameters.push(ToolParam {
            name: pname.to_string(),
            type_tag: normalize_type(p.get("type").and_then(Value::as_str)).to_string(),
            required,
            default,
        });
    }
    Ok(ToolSchema {
        name: name.to_string(),
        description: description.to_string(),
        parameters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub status: ReturnStatus,
    pub status_message: String,
    pub bot_messages: Vec<String>,
    pub arg_updates: Vec<(String, Value)>,
    /// Captured print output, addressed to the calling agent.
    pub caller_notes: String,
}

impl ToolResult {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            status: ReturnStatus::Error,
            status_message: message.into(),
            bot_messages: Vec::new(),
            arg_updates: Vec::new(),
            caller_notes: String::new(),
        }
    }
}

/// Newline-delimited JSON messages exchanged with a tool host.
pub mod wire {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Handshake {
        pub adl_tool_host: u32,
        pub schemas: Vec<Value>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Request {
        pub id: u64,
        pub call: String,
        pub args: Map<String, Value>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ArgUpdate {
        pub name: String,
        pub value: Value,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Response {
        pub id: u64,
        pub status: ReturnStatus,
        pub msg: String,
        pub bot: Vec<String>,
        pub args: Vec<ArgUpdate>,
        pub notes: String,
    }

    impl Response {
        pub fn into_result(self) -> Result<ToolResult, ToolError> {
            if let Some(bad) = self.args.iter().find(|a| a.name.is_empty()) {
                return Err(ToolError::Protocol(format!("empty arg name in response {}: {bad:?}", self.id)));
            }
            Ok(ToolResult {
                status: self.status,
                status_message: self.msg,
                bot_messages: self.bot,
                arg_updates: self.args.into_iter().map(|a| (a.name, a.value)).collect(),
                caller_notes: self.notes,
            })
        }

        pub fn from_result(id: u64, r: &ToolResult) -> Self {
            Self {
                id,
                status: r.status,
                msg: r.status_message.clone(),
                bot: r.bot_messages.clone(),
                args: r
                    .arg_updates
                    .iter()
                    .map(|(name, value)| ArgUpdate {
                        name: name.clone(),
                        value: value.clone(),
                    })
                    .collect(),
                notes: r.caller_notes.clone(),
            }
        }
    }

    pub fn encode<T: Serialize>(msg: &T) -> String {
        serde_json::to_string(msg).expect("wire messages serialize")
    }

    pub fn decode<T: serde::de::DeserializeOwned>(line: &str) -> Result<T, ToolError> {
        serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| ToolError::Protocol(format!("{e}: {}", truncate(line, 80))))
    }

    fn truncate(s: &str, n: usize) -> String {
        s.chars().take(n).collect()
    }
}

/// A process or in-memory object that serves custom functions.
pub trait ToolHost: Send + Sync {
    fn schemas(&self) -> &[ToolSchema];

    fn invoke(&self, name: &str, args: Map<String, Value>) -> Result<ToolResult, ToolError>;

    fn schema(&self, name: &str) -> Option<&ToolSchema> {
        self.schemas().iter().find(|s| s.name == name)
    }
}
