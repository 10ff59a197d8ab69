use std::path::{Path, PathBuf};
use std::sync::Arc;

use adl_core::provider::{ProviderSet, ScriptedProvider, ScriptedRules};
use adl_core::runtime::{render_transcript, Runtime, RuntimeOptions};
use adl_core::tools::FixtureHost;
use adl_core::load_program;

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn runtime(program: &str) -> Arc<Runtime> {
    let parsed = load_program(&corpus(program)).unwrap();
    let program = parsed
        .program
        .unwrap_or_else(|| panic!("{:#?}", parsed.diagnostics));
    let rules = ScriptedRules::load(&corpus("bookstore/rules.yaml")).unwrap();
    let host = FixtureHost::load(&corpus("bookstore/tools.json")).unwrap();
    Arc::new(
        Runtime::new(
            program,
            ProviderSet::new(Arc::new(ScriptedProvider::new(rules))),
            Some(Arc::new(host)),
            RuntimeOptions::default(),
        )
        .unwrap(),
    )
}

fn dialogue(name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(corpus("bookstore/dialogues.yaml")).unwrap();
    let all: std::collections::BTreeMap<String, Vec<String>> = adl_core::yaml::from_str(&text).unwrap();
    all[name].clone()
}

fn play(program: &str, name: &str) -> String {
    let rt = runtime(program);
    let mut s = rt.create_session("proactive").unwrap();
    for line in dialogue(name) {
        s.post_user_message(&line).unwrap();
    }
    render_transcript(s.transcript())
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(corpus(&format!("bookstore/golden/{name}.txt"))).unwrap()
}

#[test]
fn order_flow_matches_golden() {
    assert_eq!(play("bookstore/bookstore.yaml", "order_flow"), golden("order_flow"));
}

#[test]
fn tries_bound_matches_golden() {
    assert_eq!(play("bookstore/bookstore.yaml", "policy_tries"), golden("policy_tries"));
}

#[test]
fn discount_branch_is_diff_stable() {
    let variant = "bookstore/bookstore_discount.yaml";
    assert_eq!(play(variant, "discount"), golden("discount"));
    assert_eq!(play(variant, "order_flow"), golden("order_flow"));
    assert_eq!(play(variant, "policy_tries"), golden("policy_tries"));
    assert!(!play("bookstore/bookstore.yaml", "discount").contains("special discount"));
}

#[test]
#[ignore]
fn dump_trace() {
    let rt = runtime("bookstore/bookstore.yaml");
    let mut s = rt.create_session("proactive").unwrap();
    for line in dialogue("order_flow") {
        s.post_user_message(&line).unwrap();
    }
    print!("{}", s.trace_jsonl());
}
