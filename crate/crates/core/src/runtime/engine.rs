use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::kb::TOP_K;
use crate::model::{
    AgentBody, AgentDef, AgentKind, ArgPath, Branch, InvokeSpec, Operand, Policy, Program, ReturnStatus, Step,
    StepKind,
};
use crate::provider::{prompt_tokens, ChatMessage, ChatRequest, ChatResponse, Role};
use crate::tools::{ToolResult, ToolSchema};

use super::eval::{eval_expression, interpolate, parse_agent_name, parse_choice, parse_yes_no};
use super::markers::parse_markers;
use super::prompts;
use super::state::{Activation, Body, Cursor, Phase, RefLink, SessionState, Speaker, TranscriptEntry};
use super::trace::EventKind;
use super::{Runtime, RuntimeError, Strategy, MAX_FALLBACK_DEPTH, MAX_TOOL_CALLS_PER_TURN};

const MAX_STEPS_PER_TURN: u64 = 100_000;

enum Sig {
    Continue,
    Wait,
    Push {
        agent: String,
        via: &'static str,
        spec: Option<InvokeSpec>,
    },
    Return(ReturnStatus, String),
    Handoff(String),
    Error(RuntimeError),
}

struct Outcome {
    state: SessionState,
    events: Vec<(EventKind, Value)>,
    modeled_ms: u64,
    bot: Vec<String>,
    ok: bool,
}

impl Outcome {
    /// Events kept from a candidate that did not win.
    fn loser_events(&self) -> Vec<(EventKind, Value)> {
        self.events
            .iter()
            .filter(|(k, _)| matches!(k, EventKind::LlmCall | EventKind::ToolCall))
            .cloned()
            .collect()
    }
}

pub(crate) struct Engine<'a> {
    rt: &'a Runtime,
    program: Arc<Program>,
    strategy: Strategy,
    st: &'a mut SessionState,
    events: Vec<(EventKind, Value)>,
    modeled_ms: u64,
    scratch: bool,
    failed: Option<RuntimeError>,
    fallback_depth: u32,
    tool_calls: usize,
    pending_merge: Option<Vec<String>>,
    steps: u64,
}

fn parse_verdict(reply: &str) -> (Option<bool>, String) {
    let mut lines = reply.trim_start().splitn(2, '\n');
    let first = lines.next().unwrap_or("");
    let rest = lines.next().unwrap_or("").trim().to_string();
    let upper = first.to_ascii_uppercase();
    if !upper.contains("GUARDRAIL:") {
        return (None, reply.trim().to_string());
    }
    (Some(!upper.contains("BLOCK")), rest)
}

fn find_label(steps: &[Step], label: &str, body: Body, path: &mut Vec<(Body, usize)>) -> bool {
    for (i, step) in steps.iter().enumerate() {
        path.push((body, i));
        match &step.kind {
            StepKind::Label { name } if name == label => return true,
            StepKind::Condition { branches, else_body } => {
                for (b, br) in branches.iter().enumerate() {
                    if find_label(&br.body, label, Body::Branch(b), path) {
                        return true;
                    }
                }
                if let Some(e) = else_body {
                    if find_label(e, label, Body::Else, path) {
                        return true;
                    }
                }
            }
            _ => {}
        }
        path.pop();
    }
    false
}

fn block<'p>(def: &'p AgentDef, name: &str) -> Option<&'p [Step]> {
    def.step_blocks().into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
}

/// The step list addressed by the cursor's last level, and the index into it.
fn resolve<'p>(def: &'p AgentDef, cursor: &Cursor) -> Option<(&'p [Step], usize)> {
    let mut list = block(def, &cursor.block)?;
    let (last, parents) = cursor.path.split_last()?;
    for (i, (_, idx)) in parents.iter().enumerate() {
        let next_body = cursor.path[i + 1].0;
        let StepKind::Condition { branches, else_body } = &list.get(*idx)?.kind else {
            return None;
        };
        list = match next_body {
            Body::Branch(b) => &branches.get(b)?.body,
            Body::Else => else_body.as_deref()?,
            Body::Block => return None,
        };
    }
    Some((list, last.1))
}

impl<'a> Engine<'a> {
    pub fn new(rt: &'a Runtime, strategy: Strategy, st: &'a mut SessionState, scratch: bool) -> Self {
        Self {
            rt,
            program: Arc::clone(&rt.program),
            strategy,
            st,
            events: Vec::new(),
            modeled_ms: 0,
            scratch,
            failed: None,
            fallback_depth: 0,
            tool_calls: 0,
            pending_merge: None,
            steps: 0,
        }
    }

    pub fn finish(self) -> (Vec<(EventKind, Value)>, u64) {
        (self.events, self.modeled_ms)
    }

    fn ev(&mut self, kind: EventKind, payload: Value) {
        self.events.push((kind, payload));
    }

    fn warn(&mut self, code: &str, message: impl Into<String>) {
        let message = message.into();
        self.ev(EventKind::Warning, json!({"code": code, "message": message}));
    }

    fn emit(&mut self, agent: &str, text: &str) {
        self.st.transcript.push(TranscriptEntry {
            speaker: Speaker::Bot,
            text: text.to_string(),
        });
        self.ev(EventKind::BotMessage, json!({"agent": agent, "text": text}));
    }

    fn top(&mut self) -> &mut Activation {
        self.st.stack.last_mut().expect("non-empty stack")
    }

    fn def(&self, name: &str) -> Option<&AgentDef> {
        self.program.agent(name)
    }

    pub fn set_arg(&mut self, owner: &str, arg: &str, value: Value, source: &str) {
        for (o, a) in self.st.linked(owner, arg) {
            self.st.args.entry(o.clone()).or_default().insert(a.clone(), value.clone());
            self.ev(
                EventKind::ArgSet,
                json!({"owner": o, "arg": a, "value": value, "source": source}),
            );
        }
    }

    fn lookup(&self, agent: &str) -> impl Fn(&ArgPath) -> Value + '_ {
        let agent = agent.to_string();
        move |p: &ArgPath| {
            let (o, a) = p.resolve(&agent);
            self.st.get(&o, &a)
        }
    }

    fn render(&mut self, agent: &str, template: &str) -> String {
        let mut bad = Vec::new();
        let text = interpolate(template, &self.lookup(agent), &mut |s| bad.push(s.to_string()));
        for b in bad {
            self.warn("W_BAD_PLACEHOLDER", format!("`${{{b}}}` in agent `{agent}` is not an argument path"));
        }
        text
    }

    fn eval_operand(&self, agent: &str, op: &Operand) -> Value {
        match op {
            Operand::Literal(v) => v.clone(),
            Operand::Path(p) => self.lookup(agent)(p),
        }
    }

    fn llm_call(&mut self, agent: &str, purpose: &str, request: &ChatRequest) -> Result<ChatResponse, RuntimeError> {
        let provider = self.rt.providers.for_agent(agent);
        match provider.chat_complete(request) {
            Ok(resp) => {
                self.modeled_ms += resp.latency_ms;
                self.ev(
                    EventKind::LlmCall,
                    json!({
                        "agent": agent,
                        "purpose": purpose,
                        "prompt_tokens": resp.prompt_tokens,
                        "completion_tokens": resp.completion_tokens,
                        "latency_ms": resp.latency_ms,
                        "tool_calls": resp.tool_calls.len(),
                    }),
                );
                Ok(resp)
            }
            Err(e) => {
                self.ev(
                    EventKind::LlmCall,
                    json!({
                        "agent": agent,
                        "purpose": purpose,
                        "prompt_tokens": prompt_tokens(request),
                        "completion_tokens": 0,
                        "latency_ms": 0,
                        "error": e.code(),
                    }),
                );
                Err(RuntimeError::new(e.code(), e.to_string()))
            }
        }
    }

    fn annotate_last(&mut self, key: &str, value: Value) {
        if let Some((_, payload)) = self.events.last_mut() {
            payload[key] = value;
        }
    }

    // ---- entry points ----

    pub fn start(&mut self) {
        if let Sig::Error(e) = self.push(crate::model::MAIN_AGENT, "entry", None) {
            self.warn(&e.code, e.message);
            return;
        }
        self.drive(None, None);
    }

    pub fn user_turn(&mut self, text: &str) {
        self.st.transcript.push(TranscriptEntry {
            speaker: Speaker::User,
            text: text.to_string(),
        });
        let seed = match self.check_exit() {
            Ok(seed) => seed,
            Err(e) => Some(Sig::Error(e)),
        };
        if seed.is_none() && self.pre_turn_guardrails() {
            return;
        }
        self.drive(Some(text.to_string()), seed);
    }

    /// Judges a natural-language exit condition of the active agent.
    fn check_exit(&mut self) -> Result<Option<Sig>, RuntimeError> {
        let Some(top) = self.st.stack.last() else {
            return Ok(None);
        };
        let name = top.agent.clone();
        let Some(Policy::Text(cond)) = self.def(&name).and_then(|d| d.header.exit.clone()) else {
            return Ok(None);
        };
        if cond.trim().eq_ignore_ascii_case("default") {
            return Ok(None);
        }
        let req = ChatRequest::new(prompts::nl_judge(&self.st.transcript, &cond));
        let resp = self.llm_call(&name, "exit_judge", &req)?;
        match parse_yes_no(&resp.content) {
            Some(true) => {
                self.ev(EventKind::ExitTriggered, json!({"agent": name, "condition": cond}));
                Ok(Some(Sig::Return(ReturnStatus::Success, String::new())))
            }
            Some(false) => Ok(None),
            None => {
                self.warn("E_UNPARSEABLE", format!("exit judge reply `{}` is not yes/no", resp.content));
                Ok(None)
            }
        }
    }

    fn nearest_ensemble(&self) -> Option<usize> {
        self.st.stack.iter().rposition(|a| a.kind == AgentKind::Ensemble)
    }

    /// Runs pre-turn agents. Returns true when the turn was blocked.
    fn pre_turn_guardrails(&mut self) -> bool {
        let Some(ens_idx) = self.nearest_ensemble() else {
            return false;
        };
        let ens = self.st.stack[ens_idx].agent.clone();
        let guards = self.rt.guardrails_of(&ens).to_vec();
        if guards.is_empty() {
            return false;
        }
        if self.strategy == Strategy::Merging {
            let top = self.st.stack.last().expect("non-empty stack");
            let top_is_child = self.st.stack.len() == ens_idx + 2;
            match top.kind {
                // The orchestrator merges once it knows the handler.
                AgentKind::Ensemble => return false,
                AgentKind::Llm if top_is_child => return false,
                AgentKind::Llm => {
                    self.pending_merge = Some(guards);
                    return false;
                }
                _ => {}
            }
        }
        self.run_guardrails(&guards)
    }

    fn run_guardrails(&mut self, guards: &[String]) -> bool {
        for g in guards {
            let Some(req) = self.agent_request(g, true) else {
                continue;
            };
            let resp = match self.llm_call(g, "guardrail", &req) {
                Ok(r) => r,
                Err(e) => {
                    self.warn(&e.code, format!("guardrail `{g}` failed: {}", e.message));
                    continue;
                }
            };
            let (verdict, rest) = parse_verdict(&resp.content);
            self.annotate_last(
                "verdict",
                json!(match verdict {
                    Some(true) => "pass",
                    Some(false) => "block",
                    None => "unparseable",
                }),
            );
            if verdict.is_none() {
                self.warn("E_UNPARSEABLE", format!("guardrail `{g}` gave no verdict"));
            }
            if verdict == Some(false) {
                let text = if rest.is_empty() { prompts::DEFAULT_REFUSAL.to_string() } else { rest };
                self.emit(g, &text);
                return true;
            }
        }
        false
    }

    // ---- driver ----

    fn drive(&mut self, mut input: Option<String>, seed: Option<Sig>) {
        let mut next = seed;
        loop {
            let sig = match next.take() {
                Some(s) => s,
                None => {
                    if self.st.stack.is_empty() {
                        break;
                    }
                    self.steps += 1;
                    if self.steps > MAX_STEPS_PER_TURN {
                        Sig::Error(RuntimeError::new("E_RUNAWAY", "step budget for this turn exhausted"))
                    } else {
                        self.step_top(&mut input)
                    }
                }
            };
            match sig {
                Sig::Continue => {}
                Sig::Wait => break,
                Sig::Push { agent, via, spec } => next = Some(self.push(&agent, via, spec.as_ref())),
                Sig::Return(status, message) => next = Some(self.pop_and_deliver(status, message)),
                Sig::Handoff(to) => next = Some(self.handoff(&to)),
                Sig::Error(e) => {
                    if self.scratch {
                        self.failed = Some(e);
                        break;
                    }
                    if e.code == "E_RUNAWAY" {
                        self.warn(&e.code, e.message.clone());
                        self.emit("main", prompts::BUILTIN_APOLOGY);
                        self.park_all();
                        break;
                    }
                    next = Some(self.fallback(e));
                }
            }
        }
    }

    fn park_all(&mut self) {
        for act in &mut self.st.stack {
            act.phase = match act.kind {
                AgentKind::Flow => match &act.last_user {
                    Some(c) => {
                        act.cursor = Some(c.clone());
                        Phase::WaitingUser
                    }
                    None => act.phase,
                },
                AgentKind::Llm | AgentKind::Ensemble => Phase::Idle,
                AgentKind::Kb => act.phase,
            };
        }
    }

    fn step_top(&mut self, input: &mut Option<String>) -> Sig {
        let idx = self.st.stack.len() - 1;
        let (kind, phase, name) = {
            let t = &self.st.stack[idx];
            (t.kind, t.phase, t.agent.clone())
        };
        let has_user = self.st.transcript.iter().any(|t| t.speaker == Speaker::User);
        match (kind, phase) {
            (AgentKind::Kb, _) => self.kb_answer(&name),
            (_, Phase::AwaitingChild) => {
                Sig::Error(RuntimeError::new("E_INTERNAL", format!("`{name}` is waiting on a child that is gone")))
            }
            (AgentKind::Flow, Phase::Init) => {
                let t = self.top();
                t.cursor = Some(Cursor::start("steps"));
                t.phase = Phase::Running;
                Sig::Continue
            }
            (AgentKind::Llm | AgentKind::Ensemble, Phase::Init) => {
                let has_init = self
                    .def(&name)
                    .and_then(|d| d.init_steps())
                    .is_some_and(|s| !s.is_empty());
                let t = self.top();
                if has_init {
                    t.cursor = Some(Cursor::start("steps"));
                    t.phase = Phase::Running;
                } else {
                    t.phase = if kind == AgentKind::Llm && has_user { Phase::Respond } else { Phase::Idle };
                }
                Sig::Continue
            }
            (_, Phase::Running) => self.run_steps(input),
            (AgentKind::Flow, Phase::WaitingUser) => match input.take() {
                Some(_) => {
                    let t = self.top();
                    if let Some(c) = t.cursor.as_mut() {
                        c.advance();
                    }
                    t.phase = Phase::Running;
                    Sig::Continue
                }
                None => Sig::Wait,
            },
            (AgentKind::Llm, Phase::Respond) => self.llm_turn(&name),
            (AgentKind::Llm, Phase::Idle) => match input.take() {
                Some(_) => {
                    let reselect = self.strategy != Strategy::Autonomous
                        && idx > 0
                        && self.st.stack[idx - 1].kind == AgentKind::Ensemble;
                    if reselect {
                        self.orchestrate(idx - 1)
                    } else {
                        self.top().phase = Phase::Respond;
                        Sig::Continue
                    }
                }
                None => Sig::Wait,
            },
            (AgentKind::Ensemble, Phase::Idle) => match input.take() {
                Some(_) => self.orchestrate(idx),
                None => Sig::Wait,
            },
            _ => Sig::Wait,
        }
    }

    fn push(&mut self, agent: &str, via: &str, spec: Option<&InvokeSpec>) -> Sig {
        let Some(def) = self.def(agent) else {
            return Sig::Error(RuntimeError::new("E_UNDEF_AGENT", format!("no agent `{agent}`")));
        };
        let kind = def.kind();
        let parent = self.st.stack.last().map(|a| a.agent.clone());
        let mut act = Activation::new(agent, kind);
        if let (Some(spec), Some(parent)) = (spec, &parent) {
            for m in &spec.arg_map {
                let value = self.st.get(parent, &m.ensemble_arg);
                self.st
                    .args
                    .entry(agent.to_string())
                    .or_default()
                    .insert(m.inner_arg.clone(), value.clone());
                self.ev(
                    EventKind::ArgSet,
                    json!({"owner": agent, "arg": m.inner_arg, "value": value, "source": "mapping"}),
                );
                if m.by_ref {
                    act.ref_links.push(RefLink {
                        inner: (agent.to_string(), m.inner_arg.clone()),
                        outer: (parent.clone(), m.ensemble_arg.clone()),
                    });
                }
            }
        }
        self.ev(
            EventKind::AgentInvoked,
            json!({"agent": agent, "kind": kind, "via": via, "parent": parent}),
        );
        self.st.stack.push(act);
        Sig::Continue
    }

    fn pop_and_deliver(&mut self, status: ReturnStatus, message: String) -> Sig {
        let Some(done) = self.st.stack.pop() else {
            return Sig::Wait;
        };
        self.ev(
            EventKind::AgentReturned,
            json!({"agent": done.agent, "status": status, "message": message}),
        );
        if status == ReturnStatus::Success {
            if let Some(Policy::Agent(next)) = self.def(&done.agent).and_then(|d| d.header.exit.clone()) {
                self.ev(EventKind::ExitTriggered, json!({"agent": done.agent, "to": next}));
                return self.push(&next, "exit", None);
            }
        }
        let Some(parent) = self.st.stack.last_mut() else {
            self.st.terminated = Some((status, message));
            return Sig::Wait;
        };
        match parent.kind {
            AgentKind::Flow => {
                parent.phase = Phase::Running;
                Sig::Continue
            }
            AgentKind::Ensemble => {
                parent.phase = Phase::Idle;
                parent.last_handler = Some(done.agent.clone());
                if status == ReturnStatus::Error {
                    let detail = if message.is_empty() { "returned an error".to_string() } else { message };
                    Sig::Error(RuntimeError::new("E_AGENT_FAILED", format!("`{}`: {detail}", done.agent)))
                } else {
                    Sig::Continue
                }
            }
            AgentKind::Llm => {
                parent.phase = Phase::Idle;
                Sig::Continue
            }
            AgentKind::Kb => Sig::Continue,
        }
    }

    fn spec_in(&self, ensemble: &str, agent: &str) -> Option<InvokeSpec> {
        self.def(ensemble)?
            .contains()
            .iter()
            .find(|s| s.agent_name == agent)
            .cloned()
    }

    fn handoff(&mut self, to: &str) -> Sig {
        let Some(done) = self.st.stack.pop() else {
            return Sig::Wait;
        };
        self.ev(
            EventKind::AgentReturned,
            json!({"agent": done.agent, "status": "handoff", "message": ""}),
        );
        self.ev(EventKind::Handoff, json!({"from": done.agent, "to": to}));
        let Some(parent) = self.st.stack.last_mut() else {
            return Sig::Wait;
        };
        parent.phase = Phase::Idle;
        parent.last_handler = Some(to.to_string());
        let ens = parent.agent.clone();
        let spec = self.spec_in(&ens, to);
        self.push(to, "handoff", spec.as_ref())
    }

    /// Makes `chosen` the handler below ensemble `ens_idx`, replacing any other child.
    fn activate(&mut self, ens_idx: usize, chosen: &str) -> Sig {
        if self.st.stack.len() > ens_idx + 1 {
            if self.st.stack.len() == ens_idx + 2 && self.st.stack[ens_idx + 1].agent == chosen {
                self.top().phase = Phase::Respond;
                return Sig::Continue;
            }
            while self.st.stack.len() > ens_idx + 1 {
                let gone = self.st.stack.pop().expect("non-empty stack");
                self.ev(
                    EventKind::AgentReturned,
                    json!({"agent": gone.agent, "status": "preempted", "message": ""}),
                );
            }
        }
        let ens = self.st.stack[ens_idx].agent.clone();
        self.st.stack[ens_idx].phase = Phase::Idle;
        self.st.stack[ens_idx].last_handler = Some(chosen.to_string());
        let spec = self.spec_in(&ens, chosen);
        self.push(chosen, "ensemble", spec.as_ref())
    }

    // ---- fallback ----

    fn fallback(&mut self, err: RuntimeError) -> Sig {
        self.fallback_depth += 1;
        let agent = self.st.stack.last().map(|a| a.agent.clone()).unwrap_or_default();
        self.ev(
            EventKind::FallbackTriggered,
            json!({"agent": agent, "code": err.code, "message": err.message, "depth": self.fallback_depth}),
        );
        // Resolve the policy before the stack changes.
        let policy = self
            .st
            .stack
            .iter()
            .rev()
            .find_map(|a| {
                self.def(&a.agent)
                    .and_then(|d| d.header.fallback.clone())
                    .map(|p| (a.agent.clone(), p))
            });
        if let Some(top) = self.st.stack.last_mut() {
            match top.kind {
                AgentKind::Flow => match &top.last_user {
                    Some(c) => {
                        top.cursor = Some(c.clone());
                        top.phase = Phase::WaitingUser;
                    }
                    None => {
                        let gone = self.st.stack.pop().expect("non-empty stack");
                        self.ev(
                            EventKind::AgentReturned,
                            json!({"agent": gone.agent, "status": "error", "message": err.message}),
                        );
                        match self.st.stack.last_mut() {
                            Some(p) if p.kind == AgentKind::Flow => p.phase = Phase::Running,
                            Some(p) => p.phase = Phase::Idle,
                            None => self.st.terminated = Some((ReturnStatus::Error, err.message.clone())),
                        }
                    }
                },
                AgentKind::Llm | AgentKind::Ensemble => top.phase = Phase::Idle,
                AgentKind::Kb => {
                    self.st.stack.pop();
                }
            }
        }
        if self.fallback_depth > MAX_FALLBACK_DEPTH {
            self.emit(&agent, prompts::BUILTIN_APOLOGY);
            return Sig::Wait;
        }
        match policy {
            Some((_, Policy::Agent(target))) => {
                self.push(&target, "fallback", None)
            }
            Some((owner, Policy::Text(text))) => {
                let req = ChatRequest::new(prompts::fallback(&text, &self.st.transcript));
                match self.llm_call(&owner, "fallback", &req) {
                    Ok(r) if !r.content.trim().is_empty() => {
                        let text = r.content.trim().to_string();
                        self.emit(&owner, &text);
                    }
                    _ => self.emit(&owner, prompts::BUILTIN_APOLOGY),
                }
                Sig::Wait
            }
            None => {
                self.emit(&agent, prompts::BUILTIN_APOLOGY);
                Sig::Wait
            }
        }
    }

    // ---- flows ----

    fn jump_target(&self, def: &AgentDef, target: &str) -> Option<Cursor> {
        if let AgentBody::Flow { subflows, .. } = &def.body {
            if subflows.contains_key(target) {
                return Some(Cursor::start(target));
            }
        }
        for (name, steps) in def.step_blocks() {
            let mut path = Vec::new();
            if find_label(steps, target, Body::Block, &mut path) {
                return Some(Cursor {
                    block: name.to_string(),
                    path,
                });
            }
        }
        None
    }

    fn run_steps(&mut self, input: &mut Option<String>) -> Sig {
        let program = Arc::clone(&self.program);
        let idx = self.st.stack.len() - 1;
        let name = self.st.stack[idx].agent.clone();
        let kind = self.st.stack[idx].kind;
        let Some(def) = program.agent(&name) else {
            return Sig::Error(RuntimeError::new("E_UNDEF_AGENT", format!("no agent `{name}`")));
        };
        loop {
            self.steps += 1;
            if self.steps > MAX_STEPS_PER_TURN {
                return Sig::Error(RuntimeError::new("E_RUNAWAY", "step budget for this turn exhausted"));
            }
            let Some(mut cursor) = self.st.stack[idx].cursor.clone() else {
                return Sig::Error(RuntimeError::new("E_INTERNAL", format!("`{name}` has no cursor")));
            };
            let Some((list, i)) = resolve(def, &cursor) else {
                return Sig::Error(RuntimeError::new("E_INTERNAL", format!("bad cursor in `{name}`")));
            };
            let Some(step) = list.get(i) else {
                if cursor.path.len() > 1 {
                    cursor.path.pop();
                    cursor.advance();
                    self.st.stack[idx].cursor = Some(cursor);
                    continue;
                }
                return match kind {
                    AgentKind::Flow => Sig::Return(ReturnStatus::Success, String::new()),
                    _ => {
                        let has_user = self.st.transcript.iter().any(|t| t.speaker == Speaker::User);
                        self.st.stack[idx].cursor = None;
                        self.st.stack[idx].phase =
                            if kind == AgentKind::Llm && has_user { Phase::Respond } else { Phase::Idle };
                        Sig::Continue
                    }
                };
            };
            let advance = |eng: &mut Self, mut c: Cursor| {
                c.advance();
                eng.st.stack[idx].cursor = Some(c);
            };
            match &step.kind {
                StepKind::User => {
                    if kind != AgentKind::Flow {
                        advance(self, cursor);
                        continue;
                    }
                    self.st.stack[idx].last_user = Some(cursor.clone());
                    if input.take().is_some() {
                        advance(self, cursor);
                        continue;
                    }
                    self.st.stack[idx].phase = Phase::WaitingUser;
                    return Sig::Wait;
                }
                StepKind::Bot { template } => {
                    let text = self.render(&name, template);
                    self.emit(&name, &text);
                    advance(self, cursor);
                }
                StepKind::Set { assignments } => {
                    for (path, op) in assignments {
                        let value = self.eval_operand(&name, op);
                        let (o, a) = path.resolve(&name);
                        self.set_arg(&o, &a, value, "set");
                    }
                    advance(self, cursor);
                }
                StepKind::Label { .. } => advance(self, cursor),
                StepKind::Next { target, tries } => {
                    if let Some(k) = tries {
                        let site = cursor.site();
                        let used = self.st.stack[idx].tries.get(&site).copied().unwrap_or(0);
                        if used >= *k {
                            advance(self, cursor);
                            continue;
                        }
                        self.st.stack[idx].tries.insert(site, used + 1);
                    }
                    match self.jump_target(def, target) {
                        Some(c) => self.st.stack[idx].cursor = Some(c),
                        None => {
                            return Sig::Error(RuntimeError::new(
                                "E_UNDEF_TARGET",
                                format!("`{target}` is not a label or subflow of `{name}`"),
                            ))
                        }
                    }
                }
                StepKind::Call { callee, bindings } => {
                    let values: Vec<(String, Value)> = bindings
                        .iter()
                        .map(|(p, op)| (p.clone(), self.eval_operand(&name, op)))
                        .collect();
                    advance(self, cursor);
                    if program.agent(callee).is_some() {
                        for (p, v) in values {
                            self.set_arg(callee, &p, v, "call");
                        }
                        self.st.stack[idx].phase = Phase::AwaitingChild;
                        return Sig::Push {
                            agent: callee.clone(),
                            via: "call",
                            spec: None,
                        };
                    }
                    let args: Map<String, Value> = values.into_iter().collect();
                    self.invoke_tool(&name, callee, args);
                }
                StepKind::Condition { branches, else_body } => match self.choose_branch(&name, branches) {
                    Ok(Some(b)) => {
                        cursor.path.push((Body::Branch(b), 0));
                        self.st.stack[idx].cursor = Some(cursor);
                    }
                    Ok(None) if else_body.is_some() => {
                        cursor.path.push((Body::Else, 0));
                        self.st.stack[idx].cursor = Some(cursor);
                    }
                    Ok(None) => advance(self, cursor),
                    Err(e) => return Sig::Error(e),
                },
                StepKind::Return { status, message } => {
                    let message = self.render(&name, message);
                    return Sig::Return(*status, message);
                }
            }
        }
    }

    fn choose_branch(&mut self, agent: &str, branches: &[Branch]) -> Result<Option<usize>, RuntimeError> {
        let mut i = 0;
        while i < branches.len() {
            if branches[i].condition.is_natural_language() {
                let mut j = i;
                while j < branches.len() && branches[j].condition.is_natural_language() {
                    j += 1;
                }
                let texts: Vec<&str> = branches[i..j].iter().map(nl_text).collect();
                if texts.len() == 1 {
                    if self.judge_nl(agent, texts[0])? {
                        return Ok(Some(i));
                    }
                } else if let Some(k) = self.classify_nl(agent, &texts)? {
                    return Ok(Some(i + k));
                }
                i = j;
            } else {
                match eval_expression(&branches[i].condition, &self.lookup(agent)) {
                    Some(true) => return Ok(Some(i)),
                    Some(false) => {}
                    None => {
                        return Err(RuntimeError::new(
                            "E_BAD_REGEX",
                            format!("cannot evaluate `{}`", branches[i].source),
                        ))
                    }
                }
                i += 1;
            }
        }
        Ok(None)
    }

    fn judge_nl(&mut self, agent: &str, condition: &str) -> Result<bool, RuntimeError> {
        let req = ChatRequest::new(prompts::nl_judge(&self.st.transcript, condition));
        let resp = self.llm_call(agent, "nl_judge", &req)?;
        match parse_yes_no(&resp.content) {
            Some(b) => Ok(b),
            None => {
                self.warn(
                    "E_UNPARSEABLE",
                    format!("judge reply `{}` for `{condition}` is not yes/no; treated as no", resp.content),
                );
                Ok(false)
            }
        }
    }

    fn classify_nl(&mut self, agent: &str, conditions: &[&str]) -> Result<Option<usize>, RuntimeError> {
        let req = ChatRequest::new(prompts::nl_classify(&self.st.transcript, conditions));
        let resp = self.llm_call(agent, "nl_classify", &req)?;
        match parse_choice(&resp.content, conditions) {
            Some(choice) => Ok(choice),
            None => {
                self.warn(
                    "E_UNPARSEABLE",
                    format!("classifier reply `{}` names no condition; treated as none", resp.content),
                );
                Ok(None)
            }
        }
    }

    fn invoke_tool(&mut self, caller: &str, function: &str, args: Map<String, Value>) -> ToolResult {
        let outcome = match &self.rt.tools {
            Some(host) => host.invoke(function, args.clone()),
            None => Err(crate::tools::ToolError::UnknownTool(format!("{function} (no tool host)"))),
        };
        let result = match outcome {
            Ok(r) => r,
            Err(e) => {
                self.warn(e.code(), e.to_string());
                ToolResult::error(e.to_string())
            }
        };
        let updates: Map<String, Value> = result.arg_updates.iter().cloned().collect();
        self.ev(
            EventKind::ToolCall,
            json!({
                "caller": caller,
                "function": function,
                "args": args,
                "status": result.status,
                "msg": result.status_message,
                "updates": updates,
                "notes": result.caller_notes,
            }),
        );
        self.set_arg(function, "status", json!(result.status.as_str()), "tool");
        self.set_arg(function, "msg", json!(result.status_message), "tool");
        for (k, v) in &result.arg_updates {
            self.set_arg(function, k, v.clone(), "tool");
        }
        for b in &result.bot_messages {
            self.emit(caller, b);
        }
        result
    }

    // ---- knowledge bases ----

    fn kb_answer(&mut self, name: &str) -> Sig {
        let query = prompts::last_user_text(&self.st.transcript).to_string();
        let Some(index) = self.rt.kb.get(name) else {
            return Sig::Return(ReturnStatus::Error, "knowledge base is not loaded".into());
        };
        if index.is_empty() {
            return Sig::Return(ReturnStatus::Error, "knowledge base is empty".into());
        }
        if let Some(a) = index.faq_answer(&query) {
            let a = a.to_string();
            self.emit(name, &a);
            return Sig::Return(ReturnStatus::Success, a);
        }
        let passages: Vec<(String, String)> = index
            .search(&query, TOP_K)
            .into_iter()
            .map(|h| (h.chunk.source.clone(), h.chunk.text.trim().to_string()))
            .collect();
        if passages.is_empty() {
            return Sig::Return(ReturnStatus::Error, "no matching passage".into());
        }
        let answer = if self.rt.options.kb_synthesis {
            let req = ChatRequest::new(prompts::kb_synthesis(&passages, &query));
            match self.llm_call(name, "kb_synthesis", &req) {
                Ok(r) => r.content.trim().to_string(),
                Err(e) => return Sig::Error(e),
            }
        } else {
            format!("From {}: {}", passages[0].0, passages[0].1)
        };
        self.emit(name, &answer);
        Sig::Return(ReturnStatus::Success, answer)
    }

    // ---- LLM agents ----

    fn parent_ensemble_of_top(&self) -> Option<String> {
        let n = self.st.stack.len();
        (n >= 2 && self.st.stack[n - 2].kind == AgentKind::Ensemble).then(|| self.st.stack[n - 2].agent.clone())
    }

    fn agent_request(&self, name: &str, guardrail: bool) -> Option<ChatRequest> {
        let def = self.def(name)?;
        let AgentBody::Llm { prompt, uses, .. } = &def.body else {
            return None;
        };
        let args: Vec<(String, Value)> = def
            .header
            .args
            .iter()
            .map(|a| (a.clone(), self.st.get(name, a)))
            .collect();
        let peers: Option<Vec<&AgentDef>> = (!guardrail && self.strategy == Strategy::Autonomous)
            .then(|| self.parent_ensemble_of_top())
            .flatten()
            .map(|ens| {
                self.rt
                    .candidates_of(&ens)
                    .iter()
                    .filter(|c| c.as_str() != name)
                    .filter_map(|c| self.def(c))
                    .collect()
            });
        let system = prompts::agent_system(def, prompt, &args, peers.as_deref(), guardrail);
        let mut messages = vec![ChatMessage::system(system)];
        messages.extend(prompts::chat_window(&self.st.transcript, prompts::AGENT_WINDOW));
        let tools: Vec<ToolSchema> = if guardrail {
            Vec::new()
        } else {
            uses.iter()
                .map(|u| {
                    self.rt
                        .tools
                        .as_ref()
                        .and_then(|h| h.schema(u).cloned())
                        .unwrap_or_else(|| ToolSchema::opaque(u))
                })
                .collect()
        };
        Some(ChatRequest::new(messages).with_tools(tools))
    }

    fn llm_turn(&mut self, name: &str) -> Sig {
        let Some(mut req) = self.agent_request(name, false) else {
            return Sig::Error(RuntimeError::new("E_BAD_AGENT", format!("`{name}` is not an llm agent")));
        };
        let merged = self.pending_merge.take();
        let mut prefix = 0;
        if let Some(guards) = &merged {
            let mut messages = Vec::new();
            for g in guards {
                if let Some(r) = self.agent_request(g, true) {
                    messages.extend(r.messages);
                }
            }
            prefix = messages.len();
            messages.extend(req.messages);
            req.messages = messages;
        }
        let mut first = true;
        loop {
            let purpose = if first && merged.is_some() { "merged" } else { "agent" };
            let resp = match self.llm_call(name, purpose, &req) {
                Ok(r) => r,
                Err(e) => return Sig::Error(e),
            };
            let mut content = resp.content.clone();
            if first && merged.is_some() {
                let (verdict, rest) = parse_verdict(&content);
                self.annotate_last(
                    "verdict",
                    json!(match verdict {
                        Some(true) => "pass",
                        Some(false) => "block",
                        None => "unparseable",
                    }),
                );
                match verdict {
                    Some(false) => {
                        let who = merged.as_ref().and_then(|g| g.first()).cloned().unwrap_or_default();
                        let text = if rest.is_empty() { prompts::DEFAULT_REFUSAL.to_string() } else { rest };
                        self.emit(&who, &text);
                        self.top().phase = Phase::Idle;
                        return Sig::Wait;
                    }
                    Some(true) => content = rest,
                    None => self.warn("E_UNPARSEABLE", "merged reply carries no guardrail verdict"),
                }
                req.messages.drain(..prefix);
            }
            first = false;
            if resp.tool_calls.is_empty() {
                return self.finish_reply(name, &content);
            }
            self.tool_calls += resp.tool_calls.len();
            if self.tool_calls > MAX_TOOL_CALLS_PER_TURN {
                return Sig::Error(RuntimeError::new(
                    "E_TOOL_LOOP",
                    format!("more than {MAX_TOOL_CALLS_PER_TURN} tool calls in one turn"),
                ));
            }
            let mut assistant = ChatMessage::assistant(content);
            assistant.tool_calls = resp.tool_calls.clone();
            req.messages.push(assistant);
            for call in &resp.tool_calls {
                let result = match serde_json::from_str::<Value>(&call.arguments) {
                    Ok(Value::Object(args)) => self.invoke_tool(name, &call.name, args),
                    _ => {
                        self.warn("E_TOOL_ARGS", format!("arguments for `{}` are not a JSON object", call.name));
                        ToolResult::error("arguments must be a JSON object")
                    }
                };
                let updates: Map<String, Value> = result.arg_updates.iter().cloned().collect();
                let body = json!({
                    "status": result.status,
                    "msg": result.status_message,
                    "args": updates,
                    "notes": result.caller_notes,
                });
                let mut msg = ChatMessage::new(Role::Tool, body.to_string());
                msg.tool_call_id = Some(call.id.clone());
                req.messages.push(msg);
            }
        }
    }

    fn finish_reply(&mut self, name: &str, content: &str) -> Sig {
        let m = parse_markers(content);
        for (path, value) in &m.sets {
            let (o, a) = path.resolve(name);
            self.set_arg(&o, &a, value.clone(), "marker");
        }
        if !m.text.is_empty() {
            self.emit(name, &m.text);
        }
        if let Some(to) = &m.handoff {
            let allowed = self
                .parent_ensemble_of_top()
                .is_some_and(|ens| self.rt.candidates_of(&ens).iter().any(|c| c == to));
            if to != name {
                if allowed {
                    return Sig::Handoff(to.clone());
                }
                return Sig::Error(RuntimeError::new(
                    "E_BAD_HANDOFF",
                    format!("`{name}` handed off to `{to}`, which is not a sibling agent"),
                ));
            }
        }
        if m.deactivate {
            return Sig::Return(ReturnStatus::Success, m.text);
        }
        self.top().phase = Phase::Idle;
        Sig::Wait
    }

    // ---- ensembles ----

    fn orchestrate(&mut self, ens_idx: usize) -> Sig {
        let ens = self.st.stack[ens_idx].agent.clone();
        let cands = self.rt.candidates_of(&ens);
        if cands.is_empty() {
            return Sig::Error(RuntimeError::new("E_NO_CANDIDATE", format!("`{ens}` has no agent to route to")));
        }
        match self.strategy {
            Strategy::FirstSuccess if cands.len() > 1 => self.first_success(ens_idx, &cands),
            Strategy::BestOfN if cands.len() > 1 => self.best_of_n(ens_idx, &cands),
            _ => {
                let chosen = if cands.len() == 1 {
                    cands[0].clone()
                } else {
                    let purpose = match (self.strategy, &self.st.stack[ens_idx].last_handler) {
                        (Strategy::Autonomous, Some(_)) => "handoff_route",
                        _ => "select",
                    };
                    match self.select(&ens, &cands, purpose) {
                        Ok(c) => c,
                        Err(e) => return Sig::Error(e),
                    }
                };
                if self.strategy == Strategy::Merging {
                    let guards = self.rt.guardrails_of(&ens).to_vec();
                    if !guards.is_empty() {
                        if self.def(&chosen).map(|d| d.kind()) == Some(AgentKind::Llm) {
                            self.pending_merge = Some(guards);
                        } else if self.run_guardrails(&guards) {
                            return Sig::Wait;
                        }
                    }
                }
                self.activate(ens_idx, &chosen)
            }
        }
    }

    fn select(&mut self, ens: &str, cands: &[String], purpose: &str) -> Result<String, RuntimeError> {
        let def = self.def(ens).cloned().expect("ensemble exists");
        let policy = match &def.body {
            AgentBody::Ensemble { policy_prompt, .. } => policy_prompt.clone(),
            _ => None,
        };
        let cand_defs: Vec<&AgentDef> = cands.iter().filter_map(|c| self.program.agent(c)).collect();
        let req = ChatRequest::new(prompts::select(&def, policy.as_deref(), &cand_defs, &self.st.transcript));
        let resp = self.llm_call(ens, purpose, &req)?;
        parse_agent_name(&resp.content, cands).ok_or_else(|| {
            RuntimeError::new(
                "E_SELECT_UNPARSEABLE",
                format!("selector reply `{}` names no agent of `{ens}`", resp.content),
            )
        })
    }

    fn run_candidate(&mut self, ens_idx: usize, cand: &str) -> Outcome {
        let mut state = self.st.clone();
        let (events, modeled_ms, failed) = {
            let mut eng = Engine::new(self.rt, self.strategy, &mut state, true);
            eng.tool_calls = self.tool_calls;
            let sig = eng.activate(ens_idx, cand);
            eng.drive(None, Some(sig));
            (eng.events, eng.modeled_ms, eng.failed)
        };
        let bot: Vec<String> = events
            .iter()
            .filter(|(k, _)| *k == EventKind::BotMessage)
            .map(|(_, p)| p["text"].as_str().unwrap_or_default().to_string())
            .collect();
        let ok = failed.is_none() && !bot.is_empty();
        Outcome {
            state,
            events,
            modeled_ms,
            bot,
            ok,
        }
    }

    fn ensemble_context(&self, ens: &str, cands: &[String]) -> (AgentDef, Option<String>, Vec<AgentDef>) {
        let def = self.def(ens).cloned().expect("ensemble exists");
        let policy = match &def.body {
            AgentBody::Ensemble { policy_prompt, .. } => policy_prompt.clone(),
            _ => None,
        };
        let cand_defs = cands.iter().filter_map(|c| self.def(c).cloned()).collect();
        (def, policy, cand_defs)
    }

    fn commit(&mut self, out: Outcome) {
        *self.st = out.state;
        self.events.extend(out.events);
    }

    fn first_success(&mut self, ens_idx: usize, cands: &[String]) -> Sig {
        let ens = self.st.stack[ens_idx].agent.clone();
        let (def, policy, cand_defs) = self.ensemble_context(&ens, cands);
        let cand_refs: Vec<&AgentDef> = cand_defs.iter().collect();
        for cand in cands {
            let out = self.run_candidate(ens_idx, cand);
            self.modeled_ms += out.modeled_ms;
            if !out.ok {
                self.events.extend(out.loser_events());
                continue;
            }
            let mark = self.events.len();
            let req = ChatRequest::new(prompts::first_success_judge(
                &def,
                policy.as_deref(),
                &cand_refs,
                &self.st.transcript,
                cand,
                &out.bot.join("\n"),
            ));
            let verdict = match self.llm_call(&ens, "first_success_judge", &req) {
                Ok(r) => match parse_yes_no(&r.content) {
                    Some(v) => v,
                    None => {
                        self.warn("E_UNPARSEABLE", format!("judge reply `{}` is not yes/no", r.content));
                        false
                    }
                },
                Err(e) => {
                    let judge = self.events.split_off(mark);
                    self.events.extend(out.loser_events());
                    self.events.extend(judge);
                    return Sig::Error(e);
                }
            };
            let judge = self.events.split_off(mark);
            if verdict {
                self.commit(out);
                self.events.extend(judge);
                return Sig::Continue;
            }
            self.events.extend(out.loser_events());
            self.events.extend(judge);
        }
        Sig::Error(RuntimeError::new(
            "E_NO_CANDIDATE",
            format!("no agent of `{ens}` produced an accepted response"),
        ))
    }

    fn best_of_n(&mut self, ens_idx: usize, cands: &[String]) -> Sig {
        let ens = self.st.stack[ens_idx].agent.clone();
        let (def, policy, cand_defs) = self.ensemble_context(&ens, cands);
        let cand_refs: Vec<&AgentDef> = cand_defs.iter().collect();
        let outs: Vec<Outcome> = cands.iter().map(|c| self.run_candidate(ens_idx, c)).collect();
        self.modeled_ms += outs.iter().map(|o| o.modeled_ms).max().unwrap_or(0);
        let ok: Vec<usize> = (0..outs.len()).filter(|&i| outs[i].ok).collect();
        if ok.is_empty() {
            for o in &outs {
                self.events.extend(o.loser_events());
            }
            return Sig::Error(RuntimeError::new(
                "E_NO_CANDIDATE",
                format!("no agent of `{ens}` produced a response"),
            ));
        }
        let mark = self.events.len();
        let winner = if ok.len() == 1 {
            ok[0]
        } else {
            let responses: Vec<(String, String)> =
                ok.iter().map(|&i| (cands[i].clone(), outs[i].bot.join("\n"))).collect();
            let req = ChatRequest::new(prompts::best_of_n_judge(
                &def,
                policy.as_deref(),
                &cand_refs,
                &self.st.transcript,
                &responses,
            ));
            match self.llm_call(&ens, "best_of_n_judge", &req) {
                Ok(r) => {
                    let names: Vec<String> = ok.iter().map(|&i| cands[i].clone()).collect();
                    let digits: String = r.content.trim().chars().take_while(|c| c.is_ascii_digit()).collect();
                    match digits.parse::<usize>() {
                        Ok(n) if (1..=ok.len()).contains(&n) => ok[n - 1],
                        _ => match parse_agent_name(&r.content, &names) {
                            Some(n) => ok[names.iter().position(|x| *x == n).expect("name from list")],
                            None => {
                                self.warn(
                                    "E_UNPARSEABLE",
                                    format!("judge reply `{}` names no candidate; using the first", r.content),
                                );
                                ok[0]
                            }
                        },
                    }
                }
                Err(e) => {
                    let judge = self.events.split_off(mark);
                    for o in &outs {
                        self.events.extend(o.loser_events());
                    }
                    self.events.extend(judge);
                    return Sig::Error(e);
                }
            }
        };
        let judge = self.events.split_off(mark);
        let mut chosen = None;
        for (i, o) in outs.into_iter().enumerate() {
            if i == winner {
                self.events.extend(o.events.iter().cloned());
                chosen = Some(o);
            } else {
                self.events.extend(o.loser_events());
            }
        }
        self.events.extend(judge);
        if let Some(o) = chosen {
            *self.st = o.state;
        }
        Sig::Continue
    }
}

fn nl_text(b: &Branch) -> &str {
    match &b.condition {
        crate::model::ConditionExpr::NaturalLanguage { text } => text,
        _ => &b.source,
    }
}
