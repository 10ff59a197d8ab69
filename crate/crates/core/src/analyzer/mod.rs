//! Static analysis: agent call graph, cycle detection, lints and an
//! LLM-assisted loop check.
//!
//! Edges come from four places: `call` steps in flows and init blocks,
//! ensemble `contains` lists, fallback and exit policies that name an agent,
//! and agent names written in LLM prompts. Prompt edges are heuristic, so every
//! edge carries its provenance and the text that produced it.

mod cycles;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::*;
use crate::provider::{ChatMessage, ChatRequest, Provider, ProviderError};
use crate::runtime::prompts::debug_prompt;
use crate::tools::ToolSchema;
use crate::validate::validate_program;

pub use cycles::{elementary_cycles, CycleSearch};

pub const MAX_CYCLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FlowCall,
    PromptMention,
    Contains,
    Fallback,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub provenance: Provenance,
    /// Set when the edge sits in a retry region closed by `next` with `tries`.
    pub bounded: bool,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    /// Agents in call order, starting at the alphabetically smallest.
    pub nodes: Vec<String>,
    pub bounded: bool,
    /// One entry per hop `nodes[i] -> nodes[i + 1]` (wrapping).
    pub provenance: Vec<Provenance>,
    pub evidence: Vec<String>,
}

impl Cycle {
    pub fn describe(&self) -> String {
        let mut path = self.nodes.clone();
        path.push(self.nodes[0].clone());
        path.join(" -> ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles: Vec<Cycle>,
    pub truncated: bool,
}

/// Output of `adl analyze`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub diagnostics: Vec<Diagnostic>,
    pub cycles: Vec<Cycle>,
}

impl CallGraph {
    pub fn successors<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }
}

/// Whole-token matcher for an agent name, plus the spaced spelling
/// (`add payee`) when quoted or followed by the word "agent".
fn mention_regex(name: &str) -> Regex {
    let exact = format!(r"\b{}\b", regex::escape(name));
    let pattern = if name.contains('_') {
        let spaced = regex::escape(&name.replace('_', " "));
        format!(r#"{exact}|["'“‘]{spaced}["'”’]|\b{spaced}\s+agent\b"#)
    } else {
        exact
    };
    Regex::new(&pattern).expect("escaped agent name")
}

fn prompt_text(agent: &AgentDef) -> Option<&str> {
    match &agent.body {
        AgentBody::Llm { prompt, .. } => Some(prompt),
        AgentBody::Ensemble {
            policy_prompt: Some(p), ..
        } => Some(p),
        _ => None,
    }
}

/// `call` steps of a block with their boundedness: a call is bounded when the
/// first control transfer after it in the same step list is `next` with `tries`.
fn calls_in(steps: &[Step], out: &mut Vec<(String, bool)>) {
    for (i, step) in steps.iter().enumerate() {
        match &step.kind {
            StepKind::Call { callee, .. } => {
                let bounded = steps[i + 1..]
                    .iter()
                    .find_map(|s| match &s.kind {
                        StepKind::Next { tries, .. } => Some(tries.is_some()),
                        StepKind::Return { .. } | StepKind::Condition { .. } => Some(false),
                        _ => None,
                    })
                    .unwrap_or(false);
                out.push((callee.clone(), bounded));
            }
            StepKind::Condition {
                branches,
                else_body,
            } => {
                for b in branches {
                    calls_in(&b.body, out);
                }
                if let Some(e) = else_body {
                    calls_in(e, out);
                }
            }
            _ => {}
        }
    }
}

pub fn build_call_graph(program: &Program) -> CallGraph {
    let mut nodes: Vec<String> = program.agents.keys().cloned().collect();
    nodes.sort();
    let matchers: Vec<(&str, Regex)> = nodes.iter().map(|n| (n.as_str(), mention_regex(n))).collect();
    let mut edges = BTreeSet::new();
    let mut add = |from: &str, to: &str, provenance, bounded, evidence: String| {
        edges.insert(Edge {
            from: from.to_string(),
            to: to.to_string(),
            provenance,
            bounded,
            evidence,
        });
    };

    for agent in program.agents.values() {
        let from = agent.name.as_str();
        for (block, steps) in agent.step_blocks() {
            let mut calls = Vec::new();
            calls_in(steps, &mut calls);
            for (callee, bounded) in calls {
                if program.agent(&callee).is_some() {
                    add(from, &callee, Provenance::FlowCall, bounded, format!("{block}: call {callee}"));
                }
            }
        }
        for spec in agent.contains() {
            if program.agent(&spec.agent_name).is_some() {
                add(from, &spec.agent_name, Provenance::Contains, false, "contains".into());
            }
        }
        for (policy, provenance) in [
            (&agent.header.fallback, Provenance::Fallback),
            (&agent.header.exit, Provenance::Exit),
        ] {
            if let Some(Policy::Agent(target)) = policy {
                if program.agent(target).is_some() {
                    let field = if provenance == Provenance::Fallback { "fallback" } else { "exit" };
                    add(from, target, provenance, false, format!("{field}: {target}"));
                }
            }
        }
        if let Some(prompt) = prompt_text(agent) {
            for line in prompt.lines() {
                for (name, re) in &matchers {
                    if *name != from && re.is_match(line) {
                        add(from, name, Provenance::PromptMention, false, line.trim().to_string());
                    }
                }
            }
        }
    }
    CallGraph {
        nodes,
        edges: edges.into_iter().collect(),
    }
}

/// Elementary agent cycles. A hop between two agents is bounded only if every
/// edge between them is; a cycle is bounded if all its hops are.
pub fn detect_cycles(graph: &CallGraph) -> CycleReport {
    let index: BTreeMap<&str, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (index[e.from.as_str()], index[e.to.as_str()])).collect();
    let search = elementary_cycles(graph.nodes.len(), &pairs, MAX_CYCLES);

    let hop = |from: &str, to: &str| -> (bool, Provenance, String) {
        let parallel: Vec<&Edge> = graph.edges.iter().filter(|e| e.from == from && e.to == to).collect();
        let pick = parallel.iter().find(|e| !e.bounded).unwrap_or(&parallel[0]);
        (parallel.iter().all(|e| e.bounded), pick.provenance, pick.evidence.clone())
    };

    let cycles = search
        .cycles
        .into_iter()
        .map(|ids| {
            let nodes: Vec<String> = ids.iter().map(|&i| graph.nodes[i].clone()).collect();
            let mut bounded = true;
            let mut provenance = Vec::new();
            let mut evidence = Vec::new();
            for i in 0..nodes.len() {
                let (b, p, e) = hop(&nodes[i], &nodes[(i + 1) % nodes.len()]);
                bounded &= b;
                provenance.push(p);
                evidence.push(e);
            }
            Cycle {
                nodes,
                bounded,
                provenance,
                evidence,
            }
        })
        .collect();
    CycleReport {
        cycles,
        truncated: search.truncated,
    }
}

fn reachable_from_main(graph: &CallGraph) -> BTreeSet<&str> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([MAIN_AGENT]);
    while let Some(node) = queue.pop_front() {
        if !seen.insert(node) {
            continue;
        }
        queue.extend(graph.successors(node).map(|e| e.to.as_str()));
    }
    seen
}

/// Validation diagnostics plus graph lints. `host_schemas` is the schema list
/// of an attached tool host, if any.
pub fn lint_program(program: &Program, host_schemas: Option<&[ToolSchema]>) -> Vec<Diagnostic> {
    analyze(program, host_schemas).diagnostics
}

pub fn analyze(program: &Program, host_schemas: Option<&[ToolSchema]>) -> AnalysisReport {
    let mut out = validate_program(program);
    let graph = build_call_graph(program);

    let reachable = reachable_from_main(&graph);
    for agent in program.agents.values() {
        if !reachable.contains(agent.name.as_str()) {
            out.push(Diagnostic::warning(
                "W_UNREACHABLE_AGENT",
                format!("agent `{}` can never be reached from `main`", agent.name),
                Some(agent.loc.clone()),
            ));
        }
        for (_, steps) in agent.step_blocks() {
            crate::validate::walk_steps(steps, &mut |step| {
                if let StepKind::Call { callee, bindings } = &step.kind {
                    if !bindings.is_empty() && program.agent(callee).is_some_and(|a| a.kind() == AgentKind::Kb) {
                        out.push(Diagnostic::warning(
                            "W_KB_CALL_ARGS",
                            format!("KB agent `{callee}` takes no arguments; the bindings are ignored"),
                            Some(step.loc.clone()),
                        ));
                    }
                }
            });
        }
        if let (Some(schemas), AgentBody::Llm { uses, .. }) = (host_schemas, &agent.body) {
            for name in uses {
                if !schemas.iter().any(|s| &s.name == name) {
                    out.push(Diagnostic::warning(
                        "W_UNKNOWN_TOOL",
                        format!("`{}` uses `{name}`, which the tool host does not provide", agent.name),
                        Some(agent.loc.clone()),
                    ));
                }
            }
        }
    }

    let report = detect_cycles(&graph);
    for cycle in &report.cycles {
        let loc = program.agent(&cycle.nodes[0]).map(|a| a.loc.clone());
        let kinds: BTreeSet<&str> = cycle.provenance.iter().map(|p| provenance_name(*p)).collect();
        let via = kinds.into_iter().collect::<Vec<_>>().join(", ");
        out.push(if cycle.bounded {
            Diagnostic::info(
                "I_BOUNDED_CYCLE",
                format!("agents cycle {} (via {via}), bounded by retry limits", cycle.describe()),
                loc,
            )
        } else {
            Diagnostic::warning(
                "W_AGENT_CYCLE",
                format!("possible infinite loop {} (via {via})", cycle.describe()),
                loc,
            )
        });
    }
    if report.truncated {
        out.push(Diagnostic::warning(
            "W_CYCLE_LIMIT",
            format!("more than {MAX_CYCLES} cycles; only the first {MAX_CYCLES} are reported"),
            None,
        ));
    }
    AnalysisReport {
        diagnostics: out,
        cycles: report.cycles,
    }
}

pub fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::FlowCall => "flow_call",
        Provenance::PromptMention => "prompt_mention",
        Provenance::Contains => "contains",
        Provenance::Fallback => "fallback",
        Provenance::Exit => "exit",
    }
}

/// Static cycles next to a model's answer to the loop question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebugReport {
    pub static_cycles: Vec<Cycle>,
    pub model_reply: String,
    pub model_reports_loop: bool,
    pub agreement: bool,
}

fn says_no(reply: &str) -> bool {
    let first = reply
        .trim_start()
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("");
    first.eq_ignore_ascii_case("no")
}

/// Agreement: neither side finds an unbounded loop, or the model names every
/// agent of at least one unbounded static cycle.
pub fn compare_findings(cycles: &[Cycle], reply: &str) -> (bool, bool) {
    let model_loop = !says_no(reply);
    let unbounded: Vec<&Cycle> = cycles.iter().filter(|c| !c.bounded).collect();
    let agreement = match (model_loop, unbounded.is_empty()) {
        (false, true) => true,
        (true, false) => unbounded
            .iter()
            .any(|c| c.nodes.iter().all(|n| mention_regex(n).is_match(reply))),
        _ => false,
    };
    (model_loop, agreement)
}

pub fn llm_debug_report(program: &Program, provider: &dyn Provider) -> Result<DebugReport, ProviderError> {
    let request = ChatRequest::new(vec![ChatMessage::user(debug_prompt(&program.source))]);
    let reply = provider.chat_complete(&request)?.content;
    let static_cycles = detect_cycles(&build_call_graph(program)).cycles;
    let (model_reports_loop, agreement) = compare_findings(&static_cycles, &reply);
    Ok(DebugReport {
        static_cycles,
        model_reply: reply,
        model_reports_loop,
        agreement,
    })
}

impl DebugReport {
    pub fn render(&self) -> String {
        let mut out = String::from("Static analysis:\n");
        let unbounded: Vec<&Cycle> = self.static_cycles.iter().filter(|c| !c.bounded).collect();
        if unbounded.is_empty() {
            out.push_str("  no unbounded cycles\n");
        }
        for c in unbounded {
            let kinds: Vec<&str> = c.provenance.iter().map(|p| provenance_name(*p)).collect();
            out.push_str(&format!("  {} [{}]\n", c.describe(), kinds.join(", ")));
        }
        out.push_str("Model:\n");
        for line in self.model_reply.trim_end().lines() {
            out.push_str(&format!("  {line}\n"));
        }
        out.push_str(if self.agreement { "Verdict: agreement\n" } else { "Verdict: MISMATCH\n" });
        out
    }
}
