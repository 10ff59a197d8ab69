//! LLM access: request/response types, token accounting and backends.

mod openai;
mod scripted;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tools::ToolSchema;

pub use openai::{OpenAiConfig, OpenAiProvider};
pub use scripted::{Rule, ScriptedProvider, ScriptedRules, ScriptedToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    /// Arguments as JSON text.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolSchema>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            tools: Vec::new(),
            temperature: 0.0,
        }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSchema>) -> Self {
        self.tools = tools;
        self
    }

    pub fn system_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub tool_calls: Vec<ToolCall>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("provider timed out")]
    Timeout,
    #[error("provider error: {0}")]
    Other(String),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Http { .. } => "E_HTTP",
            ProviderError::Timeout => "E_TIMEOUT",
            ProviderError::Other(_) => "E_PROVIDER",
        }
    }
}

pub trait Provider: Send + Sync {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// `max(1, ceil(utf8_bytes / 4))`.
pub fn count_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4).max(1)
}

/// Prompt size of a request: each message is counted on its own, so a request
/// built by concatenating two others costs exactly their sum.
pub fn prompt_tokens(request: &ChatRequest) -> u64 {
    request
        .messages
        .iter()
        .map(|m| {
            let calls: String = m
                .tool_calls
                .iter()
                .map(|c| format!("{}{}", c.name, c.arguments))
                .collect();
            count_tokens(&(m.content.clone() + &calls))
        })
        .sum()
}

/// Default provider plus per-agent overrides.
#[derive(Clone)]
pub struct ProviderSet {
    default: Arc<dyn Provider>,
    overrides: HashMap<String, Arc<dyn Provider>>,
}

impl ProviderSet {
    pub fn new(default: Arc<dyn Provider>) -> Self {
        Self {
            default,
            overrides: HashMap::new(),
        }
    }

    pub fn with_override(mut self, agent: &str, provider: Arc<dyn Provider>) -> Self {
        self.overrides.insert(agent.to_string(), provider);
        self
    }

    pub fn for_agent(&self, agent: &str) -> &dyn Provider {
        self.overrides
            .get(agent)
            .map(Arc::as_ref)
            .unwrap_or(self.default.as_ref())
    }
}

/// Parses a `--provider` spec: `scripted:<path>` or `openai` (environment-configured).
pub fn provider_from_spec(spec: &str) -> Result<Arc<dyn Provider>, ProviderError> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let rules = ScriptedRules::load(std::path::Path::new(path))?;
        return Ok(Arc::new(ScriptedProvider::new(rules)));
    }
    match spec {
        "openai" => Ok(Arc::new(OpenAiProvider::new(OpenAiConfig::from_env()?))),
        other => Err(ProviderError::Other(format!(
            "unknown provider `{other}`; expected scripted:<path> or openai"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(count_tokens("hello, world"), 3);
        assert_eq!(count_tokens(""), 1);
        assert_eq!(count_tokens(&"x".repeat(480)), 120);
        assert_eq!(count_tokens("abcde"), 2);
        // multi-byte characters count by bytes
        assert_eq!(count_tokens("héé"), 2);
    }

    #[test]
    fn prompt_tokens_add_up_over_concatenation() {
        let a = ChatRequest::new(vec![ChatMessage::system("guard"), ChatMessage::user("hi there")]);
        let b = ChatRequest::new(vec![ChatMessage::system("agent prompt"), ChatMessage::user("hi there")]);
        let mut merged = a.messages.clone();
        merged.extend(b.messages.clone());
        let merged = ChatRequest::new(merged);
        assert_eq!(prompt_tokens(&merged), prompt_tokens(&a) + prompt_tokens(&b));
    }
}
