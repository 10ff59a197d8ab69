use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write;

use serde_json::Value;

fn corpus(rel: &str) -> String {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel);
    p.to_str().unwrap().to_string()
}

fn adl(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_adl"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validate_clean_program_is_silent() {
    let out = adl(&["validate", &corpus("bookstore/bookstore.yaml")], "");
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty(), "{}", text(&out.stdout));
    assert!(out.stderr.is_empty(), "{}", text(&out.stderr));
}

#[test]
fn validate_broken_program_reports_and_fails() {
    let out = adl(&["validate", &corpus("invalid/undefined_next.yaml")], "");
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("error[E_UNDEF_TARGET]"), "{stdout}");
    assert!(stdout.contains("undefined_next.yaml:"), "{stdout}");
}

#[test]
fn missing_file_fails() {
    let out = adl(&["validate", "/nonexistent/program.yaml"], "");
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("E_IO"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["frobnicate"],
        vec![],
        vec!["validate"],
        vec!["analyze", "x.yaml", "--format", "xml"],
        vec!["run", &corpus("bookstore/bookstore.yaml"), "--strategy", "greedy"],
        vec!["run", &corpus("bookstore/bookstore.yaml"), "--provider", "magic"],
        vec!["bench", &corpus("bench/bench.yaml"), "--script", &corpus("bench/script.yaml"), "--reps", "0"],
    ] {
        let out = adl(&args, "");
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", text(&out.stderr));
    }
    let help = adl(&["--help"], "");
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help.stdout).contains("validate"));
}

#[test]
fn run_replays_the_order_flow() {
    let out = adl(
        &[
            "run",
            &corpus("bookstore/bookstore.yaml"),
            "--provider",
            &format!("scripted:{}", corpus("bookstore/rules.yaml")),
            "--tool-fixture",
            &corpus("bookstore/tools.json"),
        ],
        "I'd like to place an order for a book.\nDo you have other types of books?\nI don't have anything else I want to buy.\n",
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let golden = std::fs::read_to_string(corpus("bookstore/golden/order_flow.txt")).unwrap();
    assert_eq!(text(&out.stdout), golden);
}

#[test]
fn run_writes_the_trace() {
    let dir = std::env::temp_dir().join(format!("adl-cli-trace-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let trace = dir.join("trace.jsonl");
    let out = adl(
        &[
            "run",
            &corpus("bookstore/bookstore.yaml"),
            "--provider",
            &format!("scripted:{}", corpus("bookstore/rules.yaml")),
            "--strategy",
            "merging",
            "--trace",
            trace.to_str().unwrap(),
        ],
        "What is your return policy?\n",
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().any(|e| e["kind"] == "llm_call"));
    assert!(lines.windows(2).all(|w| w[0]["seq"].as_u64() < w[1]["seq"].as_u64()));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn run_through_a_tool_host_process() {
    let host = format!(
        "{} --fixture {}",
        env!("CARGO_BIN_EXE_adl-mock-tool-host"),
        corpus("tools/custom_function.json")
    );
    let out = adl(
        &[
            "run",
            &corpus("tools/caller.yaml"),
            "--provider",
            &format!("scripted:{}", corpus("bench/synthetic/rules.yaml")),
            "--tool-host",
            &host,
        ],
        "go\nthanks\n",
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(
        text(&out.stdout),
        "Bot: Starting.\nUser: go\nBot: a response to the user.\nBot: Updated to 100.\nUser: thanks\n"
    );
}

#[test]
fn analyze_reports_the_banking_loop() {
    let out = adl(&["analyze", &corpus("banking/banking.yaml"), "--format", "json"], "");
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cycles"].as_array().unwrap().len(), 1);
    assert_eq!(v["cycles"][0]["nodes"], serde_json::json!(["add_payee", "transfer_money"]));
    assert_eq!(v["cycles"][0]["bounded"], false);
    assert_eq!(v["cycles"][0]["provenance"], serde_json::json!(["prompt_mention", "prompt_mention"]));
    let codes: Vec<&str> = v["diagnostics"].as_array().unwrap().iter().map(|d| d["code"].as_str().unwrap()).collect();
    assert!(codes.contains(&"W_AGENT_CYCLE"));

    let text_out = adl(&["analyze", &corpus("banking/banking_repaired.yaml")], "");
    assert_eq!(text_out.status.code(), Some(0));
    assert!(text(&text_out.stdout).contains("no agent cycles"));
}

#[test]
fn analyze_with_the_model() {
    let dir = std::env::temp_dir().join(format!("adl-cli-llm-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let rules = dir.join("rules.yaml");
    std::fs::write(
        &rules,
        "- when: infinite loop\n  respond: \"Yes. transfer_money enters add_payee, which enters transfer_money again.\"\n",
    )
    .unwrap();
    let out = adl(
        &["analyze", &corpus("banking/banking.yaml"), "--llm", "--provider", &format!("scripted:{}", rules.display())],
        "",
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("Static analysis:"), "{stdout}");
    assert!(stdout.contains("Verdict: agreement"), "{stdout}");
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn analyze_flags_unknown_tools_with_a_host() {
    let out = adl(
        &[
            "analyze",
            &corpus("bookstore/bookstore.yaml"),
            "--tool-fixture",
            &corpus("tools/custom_function.json"),
        ],
        "",
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("W_UNKNOWN_TOOL"), "{}", text(&out.stdout));
}

#[test]
fn bench_prints_a_table_and_json() {
    let common = [
        "bench",
        &corpus("bench/bench.yaml"),
        "--script",
        &corpus("bench/script.yaml"),
        "--provider",
        &format!("scripted:{}", corpus("bench/rules.yaml")),
        "--tool-fixture",
        &corpus("bench/tools.json"),
        "--reps",
        "2",
    ]
    .map(String::from);
    let args: Vec<&str> = common.iter().map(String::as_str).collect();
    let out = adl(&args, "");
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.lines().next().unwrap().trim_start().starts_with("Method  TokenCost  Latency"));
    assert_eq!(table.lines().count(), 6);

    let mut json_args = args.clone();
    json_args.extend(["--format", "json", "--strategies", "merging,proactive"]);
    let out = adl(&json_args, "");
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["summaries"].as_array().unwrap().len(), 2);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2 * 2 * 5);

    let mut par = json_args.clone();
    par.push("--parallel");
    let p: Value = serde_json::from_slice(&adl(&par, "").stdout).unwrap();
    let strip = |v: &Value| -> Vec<(Value, Value)> {
        v["summaries"].as_array().unwrap().iter().map(|s| (s["strategy"].clone(), s["mean_token_cost"].clone())).collect()
    };
    assert_eq!(strip(&p), strip(&v));
}

#[test]
fn config_file_sets_pre_turn_agents() {
    let dir = std::env::temp_dir().join(format!("adl-cli-config-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.yaml");
    std::fs::write(&config, "pre_turn_agents: []\n").unwrap();
    let bad = dir.join("bad.yaml");
    std::fs::write(&bad, "colour: blue\n").unwrap();
    let base = [
        "bench".to_string(),
        corpus("bench/bench.yaml"),
        "--script".into(),
        corpus("bench/script.yaml"),
        "--provider".into(),
        format!("scripted:{}", corpus("bench/rules.yaml")),
        "--reps".into(),
        "1".into(),
        "--strategies".into(),
        "merging".into(),
        "--format".into(),
        "json".into(),
        "--config".into(),
    ];
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.push(config.to_str().unwrap());
    let out = adl(&args, "");
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    // without a guardrail, merging makes one select and one agent call on the recommendation turns
    assert_eq!(v["rows"][1]["provider_calls"], 2);

    args.pop();
    args.push(bad.to_str().unwrap());
    let out = adl(&args, "");
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("E_CONFIG"));
    std::fs::remove_dir_all(dir).unwrap();
}
