//! Orchestration benchmark: drives a scripted dialogue through every
//! strategy and aggregates per-turn token cost, provider calls and latency.

use std::path::Path;
use std::sync::Arc;

use adl_core::load_program;
use adl_core::provider::{ProviderSet, ScriptedProvider, ScriptedRules};
use adl_core::runtime::{EventKind, Runtime, RuntimeError, RuntimeOptions, Session, Strategy, TurnResult};
use adl_core::tools::{FixtureHost, ToolHost};
use serde::{Deserialize, Serialize};

pub const DEFAULT_REPETITIONS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct BenchError {
    pub code: String,
    pub message: String,
}

impl BenchError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl From<RuntimeError> for BenchError {
    fn from(e: RuntimeError) -> Self {
        Self::new(&e.code, e.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub user: String,
    /// Agent expected to answer this turn.
    #[serde(default, alias = "expected_route")]
    pub expect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueScript {
    pub turns: Vec<ScriptTurn>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

impl DialogueScript {
    pub fn from_yaml(text: &str) -> Result<Self, BenchError> {
        let script: Self =
            adl_core::yaml::from_str(text).map_err(|e| BenchError::new("E_SCRIPT", e.to_string()))?;
        if script.turns.is_empty() {
            return Err(BenchError::new("E_SCRIPT", "a dialogue script needs at least one turn"));
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::new("E_SCRIPT", format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }
}

/// One turn of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub strategy: Strategy,
    pub repetition: u32,
    pub turn: u32,
    pub token_cost: u64,
    pub provider_calls: u32,
    pub modeled_latency_ms: u64,
    pub wall_latency_ms: u64,
    pub route: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub mean_token_cost: f64,
    pub mean_latency_ms: f64,
    pub mean_wall_latency_ms: f64,
    pub mean_provider_calls: f64,
    /// Variance of the per-repetition mean token cost.
    pub token_cost_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub summaries: Vec<StrategySummary>,
    pub rows: Vec<RunRow>,
}

impl BenchReport {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }
}

/// Runtime over a scripted provider and an optional canned tool host.
pub fn scripted_runtime(program: &Path, rules: &Path, tools: Option<&Path>) -> Result<Arc<Runtime>, BenchError> {
    scripted_runtime_with(program, rules, tools, RuntimeOptions::default())
}

pub fn scripted_runtime_with(
    program: &Path,
    rules: &Path,
    tools: Option<&Path>,
    options: RuntimeOptions,
) -> Result<Arc<Runtime>, BenchError> {
    let parsed = load_program(program).map_err(|e| BenchError::new("E_IO", format!("{}: {e}", program.display())))?;
    let Some(prog) = parsed.program else {
        let first = parsed.diagnostics.first().map(|d| d.to_string()).unwrap_or_default();
        return Err(BenchError::new("E_INVALID_PROGRAM", first));
    };
    let rules = ScriptedRules::load(rules).map_err(|e| BenchError::new(e.code(), e.to_string()))?;
    let host: Option<Arc<dyn ToolHost>> = match tools {
        Some(p) => Some(Arc::new(FixtureHost::load(p).map_err(|e| BenchError::new(e.code(), e.to_string()))?)),
        None => None,
    };
    let rt = Runtime::new(
        prog,
        ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
        host,
        options,
    )?;
    Ok(Arc::new(rt))
}

/// Agent of the turn's last bot message.
pub fn turn_route(result: &TurnResult) -> Option<String> {
    result
        .trace
        .iter()
        .rev()
        .find(|e| e.kind == EventKind::BotMessage)
        .and_then(|e| e.payload["agent"].as_str())
        .map(str::to_string)
}

/// Plays the script once on a fresh session, checking expected routes.
pub fn run_session(
    runtime: &Arc<Runtime>,
    script: &DialogueScript,
    strategy: Strategy,
) -> Result<(Session, Vec<TurnResult>), BenchError> {
    let mut session = runtime.create_session(strategy.as_str())?;
    let mut results = Vec::new();
    for (i, turn) in script.turns.iter().enumerate() {
        let result = session.post_user_message(&turn.user)?;
        let route = turn_route(&result);
        if let Some(expected) = &turn.expect {
            if route.as_deref() != Some(expected.as_str()) {
                return Err(BenchError::new(
                    "E_ROUTE_MISMATCH",
                    format!(
                        "{strategy}, turn {}: expected `{expected}`, answered by `{}`",
                        i + 1,
                        route.as_deref().unwrap_or("nobody")
                    ),
                ));
            }
        }
        results.push(result);
    }
    Ok((session, results))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn run_benchmark(
    runtime: &Arc<Runtime>,
    script: &DialogueScript,
    strategies: &[Strategy],
) -> Result<BenchReport, BenchError> {
    if strategies.is_empty() {
        return Err(BenchError::new("E_FORMAT", "no strategies to run"));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &strategy in strategies {
        let first = rows.len();
        for repetition in 1..=script.repetitions.max(1) {
            let (_, results) = run_session(runtime, script, strategy)?;
            rows.extend(results.iter().map(|r| RunRow {
                strategy,
                repetition,
                turn: r.metrics.turn,
                token_cost: r.metrics.token_cost,
                provider_calls: r.metrics.provider_calls,
                modeled_latency_ms: r.metrics.modeled_latency_ms,
                wall_latency_ms: r.metrics.latency_ms,
                route: turn_route(r),
            }));
        }
        let mine = &rows[first..];
        let per_rep: Vec<f64> = (1..=script.repetitions.max(1))
            .map(|rep| mean(mine.iter().filter(|r| r.repetition == rep).map(|r| r.token_cost as f64)))
            .collect();
        let rep_mean = mean(per_rep.iter().copied());
        summaries.push(StrategySummary {
            strategy,
            mean_token_cost: mean(mine.iter().map(|r| r.token_cost as f64)),
            mean_latency_ms: mean(mine.iter().map(|r| r.modeled_latency_ms as f64)),
            mean_wall_latency_ms: mean(mine.iter().map(|r| r.wall_latency_ms as f64)),
            mean_provider_calls: mean(mine.iter().map(|r| r.provider_calls as f64)),
            token_cost_variance: mean(per_rep.iter().map(|m| (m - rep_mean).powi(2))),
        });
    }
    Ok(BenchReport { summaries, rows })
}

/// `table` (right-aligned columns) or `json`.
pub fn render_report(report: &BenchReport, format: &str) -> Result<String, BenchError> {
    match format {
        "json" => serde_json::to_string_pretty(report).map_err(|e| BenchError::new("E_FORMAT", e.to_string())),
        "table" => {
            let width = report
                .summaries
                .iter()
                .map(|s| s.strategy.as_str().len())
                .max()
                .unwrap_or(0)
                .max("Method".len());
            let mut out = format!("{:>width$}  TokenCost  Latency  Calls\n", "Method");
            for s in &report.summaries {
                out.push_str(&format!(
                    "{:>width$}  {:>9.1}  {:>7.0}  {:>5.2}\n",
                    s.strategy.as_str(),
                    s.mean_token_cost,
                    s.mean_latency_ms,
                    s.mean_provider_calls
                ));
            }
            Ok(out)
        }
        other => Err(BenchError::new(
            "E_FORMAT",
            format!("unknown report format `{other}`; expected table or json"),
        )),
    }
}

/// Parses `all` or a comma-separated strategy list.
pub fn parse_strategies(spec: &str) -> Result<Vec<Strategy>, BenchError> {
    if spec.trim() == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    let list = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Strategy>().map_err(BenchError::from))
        .collect::<Result<Vec<_>, _>>()?;
    if list.is_empty() {
        return Err(BenchError::new("E_FORMAT", "no strategies to run"));
    }
    Ok(list)
}
