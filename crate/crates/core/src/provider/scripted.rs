use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{count_tokens, prompt_tokens, ChatRequest, ChatResponse, Provider, ProviderError, Role, ToolCall};

const BUILTIN_DEFAULT: &str = "I'm not sure how to help with that.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn all(&self) -> &[String] {
        match self {
            OneOrMany::One(s) => std::slice::from_ref(s),
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

/// One scripted reply. All present conditions must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    /// Substring(s) of the system text.
    #[serde(default)]
    pub system: Option<OneOrMany>,
    /// Substring(s) of the last message.
    #[serde(default)]
    pub when: Option<OneOrMany>,
    /// Regex searched in the last message.
    #[serde(default)]
    pub regex: Option<String>,
    #[serde(default)]
    pub last_role: Option<Role>,
    #[serde(default)]
    pub respond: Option<String>,
    #[serde(default)]
    pub tool_calls: Vec<ScriptedToolCall>,
    #[serde(default)]
    pub latency_ms: u64,
    /// Marks the fallback rule when rules are given as a plain list.
    #[serde(default)]
    pub default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RulesFile {
    List(Vec<Rule>),
    Map {
        rules: Vec<Rule>,
        #[serde(default)]
        default: Option<Rule>,
    },
}

#[derive(Debug, Clone)]
pub struct ScriptedRules {
    rules: Vec<(Rule, Option<Regex>)>,
    default: Rule,
}

impl ScriptedRules {
    pub fn new(rules: Vec<Rule>, default: Option<Rule>) -> Result<Self, ProviderError> {
        let mut compiled = Vec::new();
        let mut default = default;
        for rule in rules {
            if rule.default {
                default = Some(rule);
                continue;
            }
            let re = match &rule.regex {
                Some(p) => Some(
                    Regex::new(p).map_err(|e| ProviderError::Other(format!("bad rule regex `{p}`: {e}")))?,
                ),
                None => None,
            };
            compiled.push((rule, re));
        }
        Ok(Self {
            rules: compiled,
            default: default.unwrap_or(Rule {
                respond: Some(BUILTIN_DEFAULT.into()),
                ..Rule::default()
            }),
        })
    }

    pub fn from_yaml(text: &str) -> Result<Self, ProviderError> {
        let file: RulesFile =
            crate::yaml::from_str(text).map_err(|e| ProviderError::Other(format!("rules file: {e}")))?;
        match file {
            RulesFile::List(rules) => Self::new(rules, None),
            RulesFile::Map { rules, default } => Self::new(rules, default),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Other(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    /// First matching rule, or the default.
    pub fn select(&self, request: &ChatRequest) -> &Rule {
        let system = request.system_text();
        let last = request.messages.last();
        let last_text = last.map(|m| m.content.as_str()).unwrap_or("");
        self.rules
            .iter()
            .find(|(rule, re)| {
                rule
                    .system
                    .as_ref()
                    .is_none_or(|w| w.all().iter().all(|s| system.contains(s.as_str())))
                    && rule
                        .when
                        .as_ref()
                        .is_none_or(|w| w.all().iter().all(|s| last_text.contains(s.as_str())))
                    && re.as_ref().is_none_or(|re| re.is_match(last_text))
                    && rule.last_role.is_none_or(|r| last.map(|m| m.role) == Some(r))
            })
            .map(|(rule, _)| rule)
            .unwrap_or(&self.default)
    }
}

/// Deterministic provider answering from [`ScriptedRules`].
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    rules: ScriptedRules,
}

impl ScriptedProvider {
    pub fn new(rules: ScriptedRules) -> Self {
        Self { rules }
    }
}

impl Provider for ScriptedProvider {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let rule = self.rules.select(request);
        let content = rule.respond.clone().unwrap_or_default();
        let tool_calls: Vec<ToolCall> = rule
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, c)| ToolCall {
                id: format!("call_{}", i + 1),
                name: c.name.clone(),
                arguments: match &c.arguments {
                    Value::Null => "{}".to_string(),
                    v => v.to_string(),
                },
            })
            .collect();
        let completion_text: String =
            content.clone() + &tool_calls.iter().map(|c| c.arguments.as_str()).collect::<String>();
        Ok(ChatResponse {
            content,
            tool_calls,
            prompt_tokens: prompt_tokens(request),
            completion_tokens: count_tokens(&completion_text),
            latency_ms: rule.latency_ms,
        })
    }
}
