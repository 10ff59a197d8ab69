use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatRequest, ChatResponse, Provider, ProviderError, ToolCall};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
}

impl OpenAiConfig {
    /// Reads `ADL_LLM_BASE_URL`, `ADL_LLM_API_KEY` and `ADL_LLM_MODEL`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let api_key = std::env::var("ADL_LLM_API_KEY")
            .map_err(|_| ProviderError::Other("ADL_LLM_API_KEY is not set".into()))?;
        Ok(Self {
            base_url: std::env::var("ADL_LLM_BASE_URL").unwrap_or_else(|_| DEFAULT_BASE_URL.into()),
            api_key,
            model: std::env::var("ADL_LLM_MODEL").unwrap_or_else(|_| DEFAULT_MODEL.into()),
            timeout: Duration::from_millis(DEFAULT_TIMEOUT_MS),
        })
    }
}

/// Client for OpenAI-compatible `/chat/completions` endpoints.
pub struct OpenAiProvider {
    config: OpenAiConfig,
    agent: ureq::Agent,
}

impl OpenAiProvider {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let mut msg = json!({"role": m.role.as_str(), "content": m.content});
                if !m.tool_calls.is_empty() {
                    msg["tool_calls"] = m
                        .tool_calls
                        .iter()
                        .map(|c| json!({"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}))
                        .collect();
                }
                if let Some(id) = &m.tool_call_id {
                    msg["tool_call_id"] = json!(id);
                }
                msg
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "messages": messages,
        });
        if !request.tools.is_empty() {
            body["tools"] = request.tools.iter().map(|t| t.to_function_json()).collect();
        }
        body
    }

    fn send_once(&self, body: &Value) -> Result<(u16, String), ProviderError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let result = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body);
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| ProviderError::Other(e.to_string()))?;
                Ok((status, text))
            }
            Err(ureq::Error::Timeout(_)) => Err(ProviderError::Timeout),
            Err(e) => Err(ProviderError::Other(e.to_string())),
        }
    }
}

fn parse_response(text: &str) -> Result<(String, Vec<ToolCall>, u64, u64), ProviderError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ProviderError::Other(format!("bad response body: {e}")))?;
    let message = &v["choices"][0]["message"];
    if message.is_null() {
        return Err(ProviderError::Other("response has no choices".into()));
    }
    let content = message["content"].as_str().unwrap_or_default().to_string();
    let tool_calls = message["tool_calls"]
        .as_array()
        .map(|calls| {
            calls
                .iter()
                .map(|c| ToolCall {
                    id: c["id"].as_str().unwrap_or_default().to_string(),
                    name: c["function"]["name"].as_str().unwrap_or_default().to_string(),
                    arguments: c["function"]["arguments"].as_str().unwrap_or("{}").to_string(),
                })
                .collect()
        })
        .unwrap_or_default();
    let usage = &v["usage"];
    Ok((
        content,
        tool_calls,
        usage["prompt_tokens"].as_u64().unwrap_or(0),
        usage["completion_tokens"].as_u64().unwrap_or(0),
    ))
}

impl Provider for OpenAiProvider {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let body = self.body(request);
        let start = Instant::now();
        let (status, text) = match self.send_once(&body) {
            Err(ProviderError::Timeout) => self.send_once(&body)?,
            other => other?,
        };
        if !(200..300).contains(&status) {
            return Err(ProviderError::Http { status, body: text });
        }
        let (content, tool_calls, prompt_tokens, completion_tokens) = parse_response(&text)?;
        let prompt_tokens = if prompt_tokens == 0 {
            super::prompt_tokens(request)
        } else {
            prompt_tokens
        };
        Ok(ChatResponse {
            content,
            tool_calls,
            prompt_tokens,
            completion_tokens,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}
