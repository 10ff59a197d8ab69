//! `adl` subcommands. Every command writes to caller-supplied streams and
//! returns its exit status: 0 success, 1 diagnostics or runtime errors, 2 usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use adl_bench::{parse_strategies, render_report, run_benchmark, BenchReport, DialogueScript};
use adl_core::analyzer::{analyze, llm_debug_report, provenance_name};
use adl_core::provider::{provider_from_spec, ProviderSet};
use adl_core::runtime::{Runtime, RuntimeOptions, Strategy};
use adl_core::tools::{FixtureHost, SubprocessHost, ToolHost};
use adl_core::{load_program, validate_program, Diagnostic, Program};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::server::{self, AppState, ServerConfig, DEFAULT_STRATEGY};

#[derive(Debug, Parser)]
#[command(name = "adl", version, about = "Validate, analyze, run and serve ADL chatbot programs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a program.
    Validate { file: PathBuf },
    /// Chat with a program on the terminal.
    Run {
        file: PathBuf,
        #[command(flatten)]
        runtime: RuntimeArgs,
        #[arg(long, default_value = DEFAULT_STRATEGY)]
        strategy: String,
        /// Write the session trace as JSON lines when the chat ends.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Call graph, cycles and lints.
    Analyze {
        file: PathBuf,
        /// Also ask the model whether the program can loop forever.
        #[arg(long)]
        llm: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Compare orchestration strategies on a scripted dialogue.
    Bench {
        program: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "all")]
        strategies: String,
        /// Overrides the repetitions given in the script.
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        /// Run strategies concurrently.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Serve the session API over HTTP.
    Serve {
        program: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = server::DEFAULT_MAX_SESSIONS)]
        max_sessions: usize,
        /// Seconds of inactivity before a session is dropped.
        #[arg(long, default_value_t = server::DEFAULT_IDLE_TIMEOUT.as_secs())]
        idle_timeout: u64,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
struct RuntimeArgs {
    /// `scripted:<rules.yaml>` or `openai`.
    #[arg(long, default_value = "openai")]
    provider: String,
    /// Command line of a tool host process.
    #[arg(long, conflicts_with = "tool_fixture")]
    tool_host: Option<String>,
    /// JSON fixture of canned tool responses, served in process.
    #[arg(long)]
    tool_fixture: Option<PathBuf>,
    /// YAML runtime configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Runtime configuration file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pre_turn_agents: Option<Vec<String>>,
    pub kb_synthesis: Option<bool>,
    pub fetch_urls: Option<bool>,
    /// Provider spec per agent.
    pub providers: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        adl_core::yaml::from_str(&text)
            .map_err(|e| Failure::error("E_CONFIG", format!("{}: {e}", path.display())))
    }

    pub fn options(&self) -> RuntimeOptions {
        let d = RuntimeOptions::default();
        RuntimeOptions {
            pre_turn_agents: self.pre_turn_agents.clone(),
            kb_synthesis: self.kb_synthesis.unwrap_or(d.kb_synthesis),
            fetch_urls: self.fetch_urls.unwrap_or(d.fetch_urls),
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Error(String),
    /// Diagnostics were already printed.
    Reported,
}

impl Failure {
    fn error(code: &str, message: impl std::fmt::Display) -> Self {
        Failure::Error(format!("{code}: {message}"))
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::error("E_IO", format!("{}: {e}", path.display()))
    }
}

/// Parses `argv` and runs the command.
pub fn run<I, T>(
    argv: I,
    input: &mut dyn BufRead,
    interactive: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate { file } => validate(&file, out),
        Command::Run {
            file,
            runtime,
            strategy,
            trace,
        } => chat(&file, &runtime, &strategy, trace.as_deref(), input, interactive, out, err),
        Command::Analyze {
            file,
            llm,
            format,
            runtime,
        } => analyze_cmd(&file, llm, format, &runtime, out),
        Command::Bench {
            program,
            script,
            strategies,
            reps,
            format,
            parallel,
            runtime,
        } => bench(&program, &script, &strategies, reps, format, parallel, &runtime, out),
        Command::Serve {
            program,
            bind,
            max_sessions,
            idle_timeout,
            runtime,
        } => serve(
            &program,
            &bind,
            ServerConfig {
                max_sessions,
                idle_timeout: Duration::from_secs(idle_timeout),
            },
            &runtime,
            err,
        ),
    };
    let _ = out.flush();
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Error(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Reported) => 1,
    }
}

fn print_diagnostics(diags: &[Diagnostic], out: &mut dyn Write) {
    for d in diags {
        let _ = writeln!(out, "{d}");
    }
}

/// Reads, parses and validates; prints diagnostics and fails on errors.
fn checked_program(file: &Path, out: &mut dyn Write) -> Result<(Program, Vec<Diagnostic>), Failure> {
    let parsed = load_program(file).map_err(|e| Failure::io(file, e))?;
    let mut diags = parsed.diagnostics;
    if let Some(p) = &parsed.program {
        diags.extend(validate_program(p));
    }
    match parsed.program {
        Some(p) if !diags.iter().any(Diagnostic::is_error) => Ok((p, diags)),
        _ => {
            print_diagnostics(&diags, out);
            Err(Failure::Reported)
        }
    }
}

fn validate(file: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let (_, diags) = checked_program(file, out)?;
    print_diagnostics(&diags, out);
    Ok(())
}

fn tool_host(args: &RuntimeArgs) -> Result<Option<Arc<dyn ToolHost>>, Failure> {
    if let Some(path) = &args.tool_fixture {
        let host = FixtureHost::load(path).map_err(|e| Failure::error(e.code(), e))?;
        return Ok(Some(Arc::new(host)));
    }
    if let Some(cmd) = &args.tool_host {
        let mut words = cmd.split_whitespace().map(str::to_string);
        let Some(program) = words.next() else {
            return Err(Failure::Usage("--tool-host needs a command".into()));
        };
        let rest: Vec<String> = words.collect();
        let host = SubprocessHost::start(&program, &rest).map_err(|e| Failure::error(e.code(), e))?;
        return Ok(Some(Arc::new(host)));
    }
    Ok(None)
}

fn providers(args: &RuntimeArgs, config: &Config) -> Result<ProviderSet, Failure> {
    let make = |spec: &str| {
        provider_from_spec(spec).map_err(|e| {
            if spec.starts_with("scripted:") || spec == "openai" {
                Failure::error(e.code(), e)
            } else {
                Failure::Usage(e.to_string())
            }
        })
    };
    let mut set = ProviderSet::new(make(&args.provider)?);
    for (agent, spec) in &config.providers {
        set = set.with_override(agent, make(spec)?);
    }
    Ok(set)
}

fn build_runtime(file: &Path, args: &RuntimeArgs, out: &mut dyn Write) -> Result<Arc<Runtime>, Failure> {
    let (program, _) = checked_program(file, out)?;
    let config = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let providers = providers(args, &config)?;
    let host = tool_host(args)?;
    let rt = Runtime::new(program, providers, host, config.options()).map_err(|e| Failure::error(&e.code, e.message))?;
    Ok(Arc::new(rt))
}

fn parse_strategy(s: &str) -> Result<Strategy, Failure> {
    s.parse::<Strategy>().map_err(|e| Failure::Usage(e.message))
}

#[allow(clippy::too_many_arguments)]
fn chat(
    file: &Path,
    args: &RuntimeArgs,
    strategy: &str,
    trace: Option<&Path>,
    input: &mut dyn BufRead,
    interactive: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let strategy = parse_strategy(strategy)?;
    let rt = build_runtime(file, args, err)?;
    let mut session = rt.create_session(strategy.as_str()).map_err(|e| Failure::error(&e.code, e.message))?;
    for line in session.greeting() {
        let _ = writeln!(out, "Bot: {line}");
    }
    let mut failure = None;
    while !session.is_terminated() {
        if interactive {
            let _ = write!(out, "User: ");
            let _ = out.flush();
        }
        let mut line = String::new();
        match input.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                failure = Some(Failure::error("E_IO", e));
                break;
            }
        }
        let text = line.trim_end_matches(['\r', '\n']);
        if !interactive {
            let _ = writeln!(out, "User: {text}");
        }
        match session.post_user_message(text) {
            Ok(r) => {
                for b in &r.bot_messages {
                    let _ = writeln!(out, "Bot: {b}");
                }
            }
            Err(e) => {
                failure = Some(Failure::error(&e.code, e.message));
                break;
            }
        }
        let _ = out.flush();
    }
    if let Some(path) = trace {
        std::fs::write(path, session.trace_jsonl()).map_err(|e| Failure::io(path, e))?;
    }
    failure.map_or(Ok(()), Err)
}

fn analyze_cmd(file: &Path, llm: bool, format: Format, args: &RuntimeArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let (program, _) = checked_program(file, out)?;
    let host = tool_host(args)?;
    let report = analyze(&program, host.as_deref().map(|h| h.schemas()));
    let debug = if llm {
        let config = match &args.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let set = providers(args, &config)?;
        Some(llm_debug_report(&program, set.for_agent("")).map_err(|e| Failure::error(e.code(), e))?)
    } else {
        None
    };
    match format {
        Format::Json => {
            let mut value = server::analysis_json(&report);
            if let Some(d) = &debug {
                value["llm"] = json!({
                    "reply": d.model_reply,
                    "reports_loop": d.model_reports_loop,
                    "agreement": d.agreement,
                });
            }
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("json"));
        }
        Format::Text => {
            print_diagnostics(&report.diagnostics, out);
            if report.cycles.is_empty() {
                let _ = writeln!(out, "no agent cycles");
            }
            for c in &report.cycles {
                let kinds: Vec<&str> = c.provenance.iter().map(|p| provenance_name(*p)).collect();
                let _ = writeln!(
                    out,
                    "cycle ({}): {} [{}]",
                    if c.bounded { "bounded" } else { "unbounded" },
                    c.describe(),
                    kinds.join(", ")
                );
            }
            if let Some(d) = &debug {
                let _ = write!(out, "{}", d.render());
            }
        }
    }
    if report.diagnostics.iter().any(Diagnostic::is_error) {
        return Err(Failure::Reported);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    program: &Path,
    script: &Path,
    strategies: &str,
    reps: Option<u32>,
    format: ReportFormat,
    parallel: bool,
    args: &RuntimeArgs,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let strategies = parse_strategies(strategies).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut script = DialogueScript::load(script).map_err(|e| Failure::Error(e.to_string()))?;
    if let Some(n) = reps {
        if n == 0 {
            return Err(Failure::Usage("--reps must be at least 1".into()));
        }
        script.repetitions = n;
    }
    let rt = build_runtime(program, args, out)?;
    let report = if parallel {
        let parts: Vec<Result<BenchReport, _>> = std::thread::scope(|scope| {
            let handles: Vec<_> = strategies
                .iter()
                .map(|&s| {
                    let (rt, script) = (&rt, &script);
                    scope.spawn(move || run_benchmark(rt, script, &[s]))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench thread")).collect()
        });
        let mut merged = BenchReport {
            summaries: Vec::new(),
            rows: Vec::new(),
        };
        for part in parts {
            let part = part.map_err(|e| Failure::Error(e.to_string()))?;
            merged.summaries.extend(part.summaries);
            merged.rows.extend(part.rows);
        }
        merged
    } else {
        run_benchmark(&rt, &script, &strategies).map_err(|e| Failure::Error(e.to_string()))?
    };
    let format = match format {
        ReportFormat::Table => "table",
        ReportFormat::Json => "json",
    };
    let text = render_report(&report, format).map_err(|e| Failure::Error(e.to_string()))?;
    let _ = write!(out, "{text}");
    if !text.ends_with('\n') {
        let _ = writeln!(out);
    }
    Ok(())
}

fn serve(
    program: &Path,
    bind: &str,
    config: ServerConfig,
    args: &RuntimeArgs,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let rt = build_runtime(program, args, err)?;
    let tokio = tokio::runtime::Runtime::new().map_err(|e| Failure::error("E_IO", e))?;
    tokio.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Failure::error("E_BIND", format!("{bind}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Failure::error("E_BIND", e))?;
        let _ = writeln!(err, "listening on http://{addr}");
        let _ = err.flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::serve(listener, AppState::new(rt, config), shutdown)
            .await
            .map_err(|e| Failure::error("E_IO", e))
    })
}
