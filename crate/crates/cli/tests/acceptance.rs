//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time limit.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use adl_bench::{run_benchmark, run_session, scripted_runtime, DialogueScript, ScriptTurn};
use adl_core::analyzer::{build_call_graph, detect_cycles, elementary_cycles, Provenance};
use adl_core::provider::{ProviderSet, ScriptedProvider, ScriptedRules};
use adl_core::runtime::eval::eval_expression;
use adl_core::runtime::trace::strip_latency;
use adl_core::runtime::{render_transcript, EventKind, Runtime, RuntimeOptions, Strategy};
use adl_core::tools::{FixtureHost, SubprocessHost, ToolHost};
use adl_core::{
    check_source, load_program, parse_condition, parse_program, validate_program, AgentBody, ArgPath, Program,
    ReturnStatus,
};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde_json::{json, Map, Value};

type Outcome = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn load(rel: &str) -> Result<Program, String> {
    let parsed = load_program(&corpus(rel)).map_err(|e| format!("{rel}: {e}"))?;
    let mut diags = parsed.diagnostics;
    let program = parsed.program.ok_or_else(|| format!("{rel}: {diags:?}"))?;
    diags.extend(validate_program(&program));
    let errors: Vec<_> = diags.iter().filter(|d| d.is_error()).map(|d| d.code.clone()).collect();
    ensure!(errors.is_empty(), "{rel}: errors {errors:?}");
    Ok(program)
}

fn corpus_parse() -> Outcome {
    let bookstore = load("bookstore/bookstore.yaml")?;
    ensure!(bookstore.agents.len() == 5, "bookstore has {} agents", bookstore.agents.len());
    let Some(AgentBody::Flow { subflows, .. }) = bookstore.agent("order").map(|a| &a.body) else {
        return Err("order is not a flow agent".into());
    };
    ensure!(subflows.contains_key("start_ordering_operation"), "subflow start_ordering_operation missing");

    let banking = load("banking/banking.yaml")?;
    ensure!(banking.agents.len() == 10, "banking has {} agents", banking.agents.len());
    let meta = banking.agent("meta").ok_or("no meta agent")?.contains().len();
    ensure!(meta == 7, "meta contains {meta}");
    Ok(())
}

fn invalid_fixtures() -> Outcome {
    for (file, code) in [
        ("missing_main.yaml", "E_NO_MAIN"),
        ("dup_label.yaml", "E_DUP_LABEL"),
        ("undefined_next.yaml", "E_UNDEF_TARGET"),
        ("unknown_callee.yaml", "E_UNDEF_AGENT"),
        ("kb_with_steps.yaml", "E_KB_NOT_ATOMIC"),
        ("label_shadows_subflow.yaml", "E_LABEL_SHADOWS_SUBFLOW"),
    ] {
        let source = std::fs::read_to_string(corpus(&format!("invalid/{file}"))).map_err(|e| e.to_string())?;
        let codes: Vec<String> = check_source(&source, file)
            .1
            .into_iter()
            .filter(|d| d.is_error())
            .map(|d| d.code)
            .collect();
        ensure!(codes == [code], "{file}: expected [{code}], got {codes:?}");
    }
    Ok(())
}

fn bookstore_runtime(program: &str) -> Result<Arc<Runtime>, String> {
    let program = load(program)?;
    let rules = ScriptedRules::load(&corpus("bookstore/rules.yaml")).map_err(|e| e.to_string())?;
    let host = FixtureHost::load(&corpus("bookstore/tools.json")).map_err(|e| e.to_string())?;
    Runtime::new(
        program,
        ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
        Some(Arc::new(host)),
        RuntimeOptions::default(),
    )
    .map(Arc::new)
    .map_err(|e| e.to_string())
}

fn play(program: &str, dialogue: &str) -> Result<String, String> {
    let text = std::fs::read_to_string(corpus("bookstore/dialogues.yaml")).map_err(|e| e.to_string())?;
    let all: BTreeMap<String, Vec<String>> = adl_core::yaml::from_str(&text).map_err(|e| e.to_string())?;
    let rt = bookstore_runtime(program)?;
    let mut session = rt.create_session("proactive").map_err(|e| e.to_string())?;
    for line in &all[dialogue] {
        session.post_user_message(line).map_err(|e| e.to_string())?;
    }
    Ok(render_transcript(session.transcript()))
}

fn golden(name: &str) -> Result<String, String> {
    std::fs::read_to_string(corpus(&format!("bookstore/golden/{name}.txt"))).map_err(|e| e.to_string())
}

fn golden_transcripts() -> Outcome {
    let base = "bookstore/bookstore.yaml";
    let variant = "bookstore/bookstore_discount.yaml";
    ensure!(play(base, "order_flow")? == golden("order_flow")?, "order flow differs from golden");
    ensure!(play(variant, "discount")? == golden("discount")?, "discount branch differs from golden");
    for d in ["order_flow", "policy_tries"] {
        ensure!(play(variant, d)? == play(base, d)?, "discount variant changed the {d} transcript");
    }
    Ok(())
}

fn condition_oracle() -> Outcome {
    let domain = [Value::Null, json!("gold"), json!(7)];
    let text = std::fs::read_to_string(corpus("conditions/oracle.jsonl")).map_err(|e| e.to_string())?;
    let mut cases = 0;
    for line in text.lines() {
        let case: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let cond = case["condition"].as_str().ok_or("condition is not a string")?;
        let env: BTreeMap<String, Value> = serde_json::from_value(case["env"].clone()).map_err(|e| e.to_string())?;
        let atoms = cond.matches("==").count() + cond.matches("!=").count();
        ensure!((1..=3).contains(&atoms), "{cond}: {atoms} atoms");
        ensure!(env.values().all(|v| domain.contains(v)), "{env:?} leaves the domain");
        let expr = parse_condition(cond).map_err(|e| format!("{cond}: {e}"))?;
        let lookup = |p: &ArgPath| {
            let key = match &p.owner {
                Some(o) => format!("{o}.{}", p.arg),
                None => p.arg.clone(),
            };
            env.get(&key).cloned().unwrap_or(Value::Null)
        };
        let got = eval_expression(&expr, &lookup);
        ensure!(got == case["expected"].as_bool(), "{cond} with {env:?}: got {got:?}");
        cases += 1;
    }
    ensure!(cases >= 500, "only {cases} cases");
    Ok(())
}

fn orchestration_ordering() -> Outcome {
    let rt = scripted_runtime(
        &corpus("bench/bench.yaml"),
        &corpus("bench/rules.yaml"),
        Some(&corpus("bench/tools.json")),
    )
    .map_err(|e| e.to_string())?;
    let script = DialogueScript::load(&corpus("bench/script.yaml")).map_err(|e| e.to_string())?;
    ensure!(script.repetitions == 5, "script runs {} repetitions", script.repetitions);
    let report = run_benchmark(&rt, &script, &Strategy::ALL).map_err(|e| e.to_string())?;
    let summary = |s| report.summary(s).ok_or(format!("no summary for {s}"));
    let tok = |s| summary(s).map(|x| x.mean_token_cost);
    let calls = |s| summary(s).map(|x| x.mean_provider_calls);
    use Strategy::*;
    let t = [tok(Merging)?, tok(Proactive)?, tok(Autonomous)?, tok(BestOfN)?, tok(FirstSuccess)?];
    ensure!(
        t[0] == t[1] && t[1] <= t[2] && t[2] < t[3] && t[3] < t[4],
        "token ordering violated: merging {} proactive {} autonomous {} best_of_n {} first_success {}",
        t[0], t[1], t[2], t[3], t[4]
    );
    ensure!(calls(Merging)? < calls(Proactive)?, "merging does not save calls");
    for s in Strategy::ALL {
        let mut per_turn: BTreeMap<u32, BTreeSet<(u64, u32)>> = BTreeMap::new();
        for r in report.rows.iter().filter(|r| r.strategy == s) {
            per_turn.entry(r.turn).or_default().insert((r.token_cost, r.provider_calls));
        }
        ensure!(per_turn.values().all(|v| v.len() == 1), "{s}: repetitions differ");
        ensure!(summary(s)?.token_cost_variance == 0.0, "{s}: non-zero variance");
    }

    let hello = DialogueScript {
        turns: vec![ScriptTurn { user: "hello".into(), expect: None }],
        repetitions: 1,
    };
    for n in [3usize, 4] {
        let rt = scripted_runtime(
            &corpus(&format!("bench/synthetic/ensemble_{n}.yaml")),
            &corpus("bench/synthetic/rules.yaml"),
            None,
        )
        .map_err(|e| e.to_string())?;
        let (_, r) = run_session(&rt, &hello, BestOfN).map_err(|e| e.to_string())?;
        let got = r[0].metrics.provider_calls as usize;
        ensure!(got == n + 1, "best_of_n with {n} candidates made {got} calls");
        let (_, r) = run_session(&rt, &hello, FirstSuccess).map_err(|e| e.to_string())?;
        let got = r[0].metrics.provider_calls as usize;
        ensure!(got == 2 * n, "failing first_success with {n} candidates made {got} calls");
    }
    Ok(())
}

fn brute_cycles(n: usize, edges: &BTreeSet<(usize, usize)>) -> BTreeSet<Vec<usize>> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<Vec<usize>> = (0..n).map(|s| vec![s]).collect();
    while let Some(path) = stack.pop() {
        let (first, last) = (path[0], path[path.len() - 1]);
        if edges.contains(&(last, first)) {
            out.insert(path.clone());
        }
        for v in first + 1..n {
            if !path.contains(&v) && edges.contains(&(last, v)) {
                let mut next = path.clone();
                next.push(v);
                stack.push(next);
            }
        }
    }
    out
}

const NAMES: [&str; 8] = ["main", "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf"];

fn random_program(n: usize, edges: &BTreeSet<(usize, usize)>) -> String {
    let mut yaml = String::new();
    for (i, name) in NAMES.iter().enumerate().take(n) {
        let targets: Vec<&str> = edges.iter().filter(|(a, _)| *a == i).map(|(_, b)| NAMES[*b]).collect();
        let mut prompt = String::from("Answer the user politely.");
        for t in targets {
            prompt.push_str(&format!(" If needed, hand over to the {t} agent."));
        }
        yaml.push_str(&format!(
            "{name}:\n  type: llm agent\n  description: Helper {i}.\n  prompt: \"{prompt}\"\n\n"
        ));
    }
    yaml
}

fn analyzer() -> Outcome {
    let report = detect_cycles(&build_call_graph(&load("banking/banking.yaml")?));
    ensure!(report.cycles.len() == 1, "banking has {} cycles", report.cycles.len());
    let c = &report.cycles[0];
    let nodes: BTreeSet<&str> = c.nodes.iter().map(String::as_str).collect();
    ensure!(nodes == BTreeSet::from(["transfer_money", "add_payee"]), "cycle is {:?}", c.nodes);
    ensure!(
        c.provenance.iter().all(|p| *p == Provenance::PromptMention),
        "provenance {:?}",
        c.provenance
    );
    let repaired = detect_cycles(&build_call_graph(&load("banking/banking_repaired.yaml")?));
    ensure!(repaired.cycles.is_empty(), "repaired program has cycles {:?}", repaired.cycles);

    let mut rng = StdRng::seed_from_u64(20240611);
    for trial in 0..100 {
        let n = rng.random_range(1..=8usize);
        let density = rng.random_range(0.1..0.6f64);
        let mut edges = BTreeSet::new();
        for a in 0..n {
            for b in 0..n {
                if a != b && rng.random_bool(density) {
                    edges.insert((a, b));
                }
            }
        }
        let expected = brute_cycles(n, &edges);

        let source = random_program(n, &edges);
        let parsed = parse_program(&source, "random.yaml");
        let program = parsed.program.ok_or_else(|| format!("trial {trial}: {:?}", parsed.diagnostics))?;
        let report = detect_cycles(&build_call_graph(&program));
        let index: BTreeMap<&str, usize> = NAMES.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let got: BTreeSet<Vec<usize>> = report
            .cycles
            .iter()
            .map(|c| {
                let ids: Vec<usize> = c.nodes.iter().map(|n| index[n.as_str()]).collect();
                let k = (0..ids.len()).min_by_key(|&i| ids[i]).unwrap_or(0);
                ids[k..].iter().chain(&ids[..k]).copied().collect()
            })
            .collect();
        ensure!(got == expected, "trial {trial}: program graph {edges:?} gave {got:?}, brute force {expected:?}");

        let mut raw = edges.clone();
        if rng.random_bool(0.3) {
            let v = rng.random_range(0..n);
            raw.insert((v, v));
        }
        let pairs: Vec<_> = raw.iter().copied().collect();
        let fast: BTreeSet<Vec<usize>> = elementary_cycles(n, &pairs, usize::MAX - 1).cycles.into_iter().collect();
        ensure!(fast == brute_cycles(n, &raw), "trial {trial}: raw graph {raw:?} disagrees");
    }
    Ok(())
}

fn mock_host(extra: &[&str]) -> Result<SubprocessHost, adl_core::tools::ToolError> {
    let mut args = vec!["--fixture".to_string(), corpus("tools/custom_function.json").display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    SubprocessHost::start(env!("CARGO_BIN_EXE_adl-mock-tool-host"), &args)
}

fn go_args() -> Map<String, Value> {
    let mut args = Map::new();
    args.insert("required_arg".into(), json!("go"));
    args
}

fn tool_protocol() -> Outcome {
    let host = mock_host(&[]).map_err(|e| e.to_string())?;
    ensure!(host.schema("custom_function").is_some(), "handshake lacks custom_function");
    let r = host.invoke("custom_function", go_args()).map_err(|e| e.to_string())?;
    ensure!(r.status == ReturnStatus::Success, "status {:?}", r.status);
    ensure!(r.bot_messages.len() == 1, "bot messages {:?}", r.bot_messages);
    ensure!(
        r.arg_updates == [("argument_name".to_string(), json!(100))],
        "arg updates {:?}",
        r.arg_updates
    );
    ensure!(r.caller_notes == "message to the caller agent.\n", "notes {:?}", r.caller_notes);

    for mode in ["response", "nonjson", "eof"] {
        let host = mock_host(&["--corrupt", mode]).map_err(|e| e.to_string())?;
        let err = host.invoke("custom_function", go_args()).err().ok_or(format!("{mode}: call succeeded"))?;
        ensure!(err.code() == "E_TOOL_PROTOCOL", "{mode}: got {}", err.code());
    }

    let program = load_program(&corpus("tools/caller.yaml"))
        .map_err(|e| e.to_string())?
        .program
        .ok_or("caller.yaml does not parse")?;
    let rules = ScriptedRules::load(&corpus("bench/synthetic/rules.yaml")).map_err(|e| e.to_string())?;
    let host = mock_host(&["--corrupt", "nonjson"]).map_err(|e| e.to_string())?;
    let rt = Arc::new(
        Runtime::new(
            program,
            ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
            Some(Arc::new(host)),
            RuntimeOptions::default(),
        )
        .map_err(|e| e.to_string())?,
    );
    let mut session = rt.create_session("proactive").map_err(|e| e.to_string())?;
    let turn = session.post_user_message("go").map_err(|e| format!("session crashed: {e}"))?;
    ensure!(
        turn.trace
            .iter()
            .any(|e| e.kind == EventKind::Warning && e.payload.to_string().contains("E_TOOL_PROTOCOL")),
        "no E_TOOL_PROTOCOL warning in the trace"
    );
    ensure!(
        turn.bot_messages.iter().any(|m| m.starts_with("The function failed")),
        "bot said {:?}",
        turn.bot_messages
    );
    let last = session.post_user_message("thanks").map_err(|e| format!("session crashed: {e}"))?;
    ensure!(last.terminated, "session did not finish");
    Ok(())
}

fn determinism() -> Outcome {
    let script = DialogueScript::load(&corpus("bench/script.yaml")).map_err(|e| e.to_string())?;
    let run = || -> Result<Vec<Vec<Value>>, String> {
        let rt = scripted_runtime(
            &corpus("bench/bench.yaml"),
            &corpus("bench/rules.yaml"),
            Some(&corpus("bench/tools.json")),
        )
        .map_err(|e| e.to_string())?;
        let mut traces = Vec::new();
        for s in Strategy::ALL {
            let (session, _) = run_session(&rt, &script, s).map_err(|e| e.to_string())?;
            traces.push(
                session
                    .trace()
                    .iter()
                    .map(|e| strip_latency(&serde_json::to_value(e).expect("event serializes")))
                    .collect(),
            );
        }
        Ok(traces)
    };
    let (a, b) = (run()?, run()?);
    for (s, (x, y)) in Strategy::ALL.iter().zip(a.iter().zip(&b)) {
        ensure!(!x.is_empty(), "{s}: empty trace");
        ensure!(x == y, "{s}: traces differ");
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("corpus parse", Duration::from_secs(1), corpus_parse),
        ("invalid fixtures", Duration::from_secs(1), invalid_fixtures),
        ("golden transcripts", Duration::from_secs(5), golden_transcripts),
        ("condition oracle", Duration::from_secs(5), condition_oracle),
        ("orchestration ordering", Duration::from_secs(30), orchestration_ordering),
        ("analyzer cycles", Duration::from_secs(10), analyzer),
        ("tool protocol", Duration::from_secs(5), tool_protocol),
        ("determinism", Duration::from_secs(30), determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed <= limit {
                Ok(())
            } else {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(()) => println!("PASS {} {name} ({elapsed:.2?} <= {limit:?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
