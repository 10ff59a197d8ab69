use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AgentInvoked,
    AgentReturned,
    LlmCall,
    ToolCall,
    ArgSet,
    BotMessage,
    FallbackTriggered,
    ExitTriggered,
    Handoff,
    Warning,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::AgentInvoked => "agent_invoked",
            EventKind::AgentReturned => "agent_returned",
            EventKind::LlmCall => "llm_call",
            EventKind::ToolCall => "tool_call",
            EventKind::ArgSet => "arg_set",
            EventKind::BotMessage => "bot_message",
            EventKind::FallbackTriggered => "fallback_triggered",
            EventKind::ExitTriggered => "exit_triggered",
            EventKind::Handoff => "handoff",
            EventKind::Warning => "warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub turn: u32,
    pub kind: EventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: u32,
    /// Sum of prompt tokens over every provider call in the turn.
    pub token_cost: u64,
    /// Wall-clock duration of the turn.
    pub latency_ms: u64,
    /// Provider-reported latency along the critical path.
    pub modeled_latency_ms: u64,
    pub provider_calls: u32,
}

/// One JSON object per line.
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Removes every `latency_ms` / `modeled_latency_ms` field, recursively.
pub fn strip_latency(value: &Value) -> Value {
    match value {
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(k, _)| !k.ends_with("latency_ms"))
                .map(|(k, v)| (k.clone(), strip_latency(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(strip_latency).collect()),
        other => other.clone(),
    }
}

/// Sum of `prompt_tokens` over the `llm_call` events of one turn.
pub fn turn_token_cost(events: &[TraceEvent], turn: u32) -> u64 {
    events
        .iter()
        .filter(|e| e.turn == turn && e.kind == EventKind::LlmCall)
        .map(|e| e.payload["prompt_tokens"].as_u64().unwrap_or(0))
        .sum()
}
