//! Session execution.
//!
//! A [`Runtime`] holds a validated program with its providers, tool host and
//! knowledge-base indexes. Each [`Session`] owns an activation stack, the
//! per-agent argument namespaces, the transcript and the trace.

mod engine;
pub mod eval;
pub mod markers;
pub mod prompts;
mod state;
pub mod trace;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::kb::{ingest_sources, KbIndex};
use crate::model::{AgentBody, AgentKind, Diagnostic, Program, ReturnStatus, Value};
use crate::provider::ProviderSet;
use crate::tools::ToolHost;

pub use state::{Speaker, TranscriptEntry};
pub use trace::{EventKind, TraceEvent, TurnMetrics};

use engine::Engine;
use state::SessionState;

pub const MAX_TOOL_CALLS_PER_TURN: usize = 8;
pub const MAX_FALLBACK_DEPTH: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct RuntimeError {
    pub code: String,
    pub message: String,
}

impl RuntimeError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Merging,
    FirstSuccess,
    BestOfN,
    Proactive,
    Autonomous,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Merging,
        Strategy::FirstSuccess,
        Strategy::BestOfN,
        Strategy::Proactive,
        Strategy::Autonomous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Merging => "merging",
            Strategy::FirstSuccess => "first_success",
            Strategy::BestOfN => "best_of_n",
            Strategy::Proactive => "proactive",
            Strategy::Autonomous => "autonomous",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| {
                RuntimeError::new(
                    "E_STRATEGY_UNKNOWN",
                    format!(
                        "unknown strategy `{s}`; expected one of merging, first_success, best_of_n, proactive, autonomous"
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeOptions {
    /// Agents run before every turn of an ensemble that contains them. When
    /// unset, contained agents whose name or description mentions
    /// "guardrail" are used.
    pub pre_turn_agents: Option<Vec<String>>,
    /// Phrase KB answers through the provider instead of quoting the best chunk.
    pub kb_synthesis: bool,
    pub fetch_urls: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            pre_turn_agents: None,
            kb_synthesis: true,
            fetch_urls: false,
        }
    }
}

pub struct Runtime {
    pub(crate) program: Arc<Program>,
    pub(crate) providers: ProviderSet,
    pub(crate) tools: Option<Arc<dyn ToolHost>>,
    pub(crate) kb: HashMap<String, KbIndex>,
    pub(crate) options: RuntimeOptions,
    pub(crate) guardrails: HashMap<String, Vec<String>>,
    diagnostics: Vec<Diagnostic>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("program", &self.program.file)
            .field("options", &self.options)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(
        program: Program,
        providers: ProviderSet,
        tools: Option<Arc<dyn ToolHost>>,
        options: RuntimeOptions,
    ) -> Result<Self, RuntimeError> {
        let mut diagnostics = crate::validate::validate_program(&program);
        if let Some(first) = diagnostics.iter().find(|d| d.is_error()) {
            return Err(RuntimeError::new(
                "E_INVALID_PROGRAM",
                format!("program has errors; first: {first}"),
            ));
        }
        let base = program.base_dir.clone().unwrap_or_else(|| ".".into());
        let mut kb = HashMap::new();
        for agent in program.agents.values() {
            if let AgentBody::Kb { sources, faq } = &agent.body {
                let (index, diags) = ingest_sources(sources, faq, &base, options.fetch_urls)
                    .map_err(|e| RuntimeError::new(e.code(), format!("agent `{}`: {e}", agent.name)))?;
                diagnostics.extend(diags);
                kb.insert(agent.name.clone(), index);
            }
        }
        let mut guardrails = HashMap::new();
        for agent in program.agents.values() {
            let guards: Vec<String> = agent
                .contains()
                .iter()
                .map(|s| s.agent_name.clone())
                .filter(|name| {
                    let Some(def) = program.agent(name) else {
                        return false;
                    };
                    if def.kind() != AgentKind::Llm {
                        return false;
                    }
                    match &options.pre_turn_agents {
                        Some(list) => list.contains(name),
                        None => {
                            name.to_lowercase().contains("guardrail")
                                || def.description().to_lowercase().contains("guardrail")
                        }
                    }
                })
                .collect();
            if !guards.is_empty() {
                guardrails.insert(agent.name.clone(), guards);
            }
        }
        Ok(Self {
            program: Arc::new(program),
            providers,
            tools,
            kb,
            options,
            guardrails,
            diagnostics,
        })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// Non-fatal diagnostics from validation and knowledge ingestion.
    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    /// Schemas advertised by the tool host, if one is attached.
    pub fn tool_schemas(&self) -> Option<&[crate::tools::ToolSchema]> {
        self.tools.as_deref().map(|h| h.schemas())
    }

    /// Pre-turn agents of an ensemble.
    pub fn guardrails_of(&self, ensemble: &str) -> &[String] {
        self.guardrails.get(ensemble).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Contained agents an ensemble may route to.
    pub fn candidates_of(&self, ensemble: &str) -> Vec<String> {
        let guards = self.guardrails_of(ensemble);
        self.program
            .agent(ensemble)
            .map(|a| {
                a.contains()
                    .iter()
                    .map(|s| s.agent_name.clone())
                    .filter(|n| !guards.contains(n))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn create_session(self: &Arc<Self>, strategy: &str) -> Result<Session, RuntimeError> {
        let strategy: Strategy = strategy.parse()?;
        Ok(Session::start(Arc::clone(self), strategy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub bot_messages: Vec<String>,
    pub terminated: bool,
    pub trace: Vec<TraceEvent>,
    pub metrics: TurnMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub active_agent: Option<String>,
    pub stack: Vec<String>,
    pub args: BTreeMap<String, BTreeMap<String, Value>>,
    pub transcript: Vec<TranscriptEntry>,
    pub terminated: bool,
    pub last_turn_metrics: Option<TurnMetrics>,
}

pub struct Session {
    runtime: Arc<Runtime>,
    strategy: Strategy,
    state: SessionState,
    trace: Vec<TraceEvent>,
    turn: u32,
    metrics: Vec<TurnMetrics>,
    greeting: Vec<String>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("strategy", &self.strategy)
            .field("turn", &self.turn)
            .finish_non_exhaustive()
    }
}

impl Session {
    fn start(runtime: Arc<Runtime>, strategy: Strategy) -> Self {
        let mut session = Self {
            runtime,
            strategy,
            state: SessionState::default(),
            trace: Vec::new(),
            turn: 0,
            metrics: Vec::new(),
            greeting: Vec::new(),
        };
        let started = Instant::now();
        let rt = Arc::clone(&session.runtime);
        let mut eng = Engine::new(&rt, strategy, &mut session.state, false);
        eng.start();
        let (events, modeled) = eng.finish();
        let result = session.commit(events, modeled, started);
        session.greeting = result.bot_messages;
        session
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    /// Bot messages emitted while the session was created.
    pub fn greeting(&self) -> &[String] {
        &self.greeting
    }

    pub fn is_terminated(&self) -> bool {
        self.state.terminated.is_some()
    }

    pub fn termination(&self) -> Option<(ReturnStatus, &str)> {
        self.state.terminated.as_ref().map(|(s, m)| (*s, m.as_str()))
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn post_user_message(&mut self, text: &str) -> Result<TurnResult, RuntimeError> {
        if self.is_terminated() {
            return Err(RuntimeError::new("E_TERMINATED", "the session has terminated"));
        }
        self.turn += 1;
        let started = Instant::now();
        let rt = Arc::clone(&self.runtime);
        let mut eng = Engine::new(&rt, self.strategy, &mut self.state, false);
        eng.user_turn(text);
        let (events, modeled) = eng.finish();
        Ok(self.commit(events, modeled, started))
    }

    fn commit(&mut self, events: Vec<(EventKind, Value)>, modeled: u64, started: Instant) -> TurnResult {
        let first = self.trace.len();
        for (kind, payload) in events {
            self.trace.push(TraceEvent {
                seq: self.trace.len() as u64 + 1,
                turn: self.turn,
                kind,
                payload,
            });
        }
        let new = &self.trace[first..];
        let llm_calls = new.iter().filter(|e| e.kind == EventKind::LlmCall);
        let metrics = TurnMetrics {
            turn: self.turn,
            token_cost: llm_calls
                .clone()
                .map(|e| e.payload["prompt_tokens"].as_u64().unwrap_or(0))
                .sum(),
            latency_ms: started.elapsed().as_millis() as u64,
            modeled_latency_ms: modeled,
            provider_calls: llm_calls.count() as u32,
        };
        self.metrics.push(metrics.clone());
        TurnResult {
            bot_messages: new
                .iter()
                .filter(|e| e.kind == EventKind::BotMessage)
                .map(|e| e.payload["text"].as_str().unwrap_or_default().to_string())
                .collect(),
            terminated: self.is_terminated(),
            trace: new.to_vec(),
            metrics,
        }
    }

    pub fn get_state(&self) -> StateSnapshot {
        StateSnapshot {
            active_agent: self.state.stack.last().map(|a| a.agent.clone()),
            stack: self.state.stack.iter().map(|a| a.agent.clone()).collect(),
            args: self.state.args.clone(),
            transcript: self.state.transcript.clone(),
            terminated: self.is_terminated(),
            last_turn_metrics: self.metrics.last().cloned(),
        }
    }

    /// Writes an argument from outside the conversation; ref-linked
    /// arguments are updated too.
    pub fn set_arg(&mut self, owner: &str, arg: &str, value: Value) -> Result<(), RuntimeError> {
        if self.runtime.program.agent(owner).is_none() && !self.runtime.program.is_function(owner) {
            return Err(RuntimeError::new("E_UNDEF_AGENT", format!("no agent or function `{owner}`")));
        }
        let rt = Arc::clone(&self.runtime);
        let mut eng = Engine::new(&rt, self.strategy, &mut self.state, false);
        eng.set_arg(owner, arg, value, "external");
        let (events, _) = eng.finish();
        for (kind, payload) in events {
            self.trace.push(TraceEvent {
                seq: self.trace.len() as u64 + 1,
                turn: self.turn,
                kind,
                payload,
            });
        }
        Ok(())
    }

    pub fn get_arg(&self, owner: &str, arg: &str) -> Value {
        self.state.get(owner, arg)
    }

    pub fn count_turn_tokens(&self, turn: u32) -> Result<u64, RuntimeError> {
        if turn > self.turn {
            return Err(RuntimeError::new("E_NO_TURN", format!("turn {turn} has not happened")));
        }
        Ok(trace::turn_token_cost(&self.trace, turn))
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn trace_jsonl(&self) -> String {
        trace::to_jsonl(&self.trace)
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.state.transcript
    }

    pub fn turn_metrics(&self) -> &[TurnMetrics] {
        &self.metrics
    }
}

/// `User: ...` / `Bot: ...` lines, one per transcript entry.
pub fn render_transcript(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(match e.speaker {
            Speaker::User => "User: ",
            Speaker::Bot => "Bot: ",
        });
        out.push_str(&e.text);
        out.push('\n');
    }
    out
}
