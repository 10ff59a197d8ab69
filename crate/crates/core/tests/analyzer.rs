use std::path::{Path, PathBuf};

use adl_core::analyzer::{analyze, build_call_graph, detect_cycles, llm_debug_report, Provenance};
use adl_core::provider::{ScriptedProvider, ScriptedRules};
use adl_core::{load_program, Program};

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn load(rel: &str) -> Program {
    load_program(&corpus(rel)).unwrap().program.unwrap()
}

fn scripted(reply: &str) -> ScriptedProvider {
    let yaml = format!("- default: true\n  respond: {}\n", serde_json::to_string(reply).unwrap());
    ScriptedProvider::new(ScriptedRules::from_yaml(&yaml).unwrap())
}

#[test]
fn banking_has_exactly_the_transfer_loop() {
    let report = detect_cycles(&build_call_graph(&load("banking/banking.yaml")));
    assert!(!report.truncated);
    assert_eq!(report.cycles.len(), 1, "{:#?}", report.cycles);
    let c = &report.cycles[0];
    assert_eq!(c.nodes, ["add_payee", "transfer_money"]);
    assert!(!c.bounded);
    assert_eq!(c.provenance, [Provenance::PromptMention, Provenance::PromptMention]);
    assert!(c.evidence[0].contains("enter the transfer_money agent"));
    assert!(c.evidence[1].contains("\"add payee\" agent"));
}

#[test]
fn repaired_banking_is_acyclic() {
    assert!(detect_cycles(&build_call_graph(&load("banking/banking_repaired.yaml"))).cycles.is_empty());
}

#[test]
fn bookstore_edges_and_clean_lint() {
    let p = load("bookstore/bookstore.yaml");
    let g = build_call_graph(&p);
    for (a, b) in [
        ("main", "triage"),
        ("triage", "store_policy_kb"),
        ("triage", "book_recommendation"),
        ("triage", "order"),
        ("order", "book_recommendation"),
        ("order", "store_policy_kb"),
    ] {
        assert!(g.has_edge(a, b), "missing {a} -> {b}");
    }
    assert_eq!(g.edges.len(), 6, "{:#?}", g.edges);
    let kb_edge = g.edges.iter().find(|e| e.from == "order" && e.to == "store_policy_kb").unwrap();
    assert!(kb_edge.bounded);
    let report = analyze(&p, None);
    assert!(report.cycles.is_empty());
    assert!(report.diagnostics.is_empty(), "{:#?}", report.diagnostics);
}

#[test]
fn banking_lints_flag_the_loop_and_the_orphan_kb() {
    let report = analyze(&load("banking/banking.yaml"), None);
    let codes: Vec<&str> = report.diagnostics.iter().map(|d| d.code.as_str()).collect();
    assert!(codes.contains(&"W_AGENT_CYCLE"));
    assert!(codes.contains(&"W_UNREACHABLE_AGENT"));
    assert!(report.diagnostics.iter().all(|d| !d.is_error()));
}

#[test]
fn llm_debug_agreement_and_mismatch() {
    let banking = load("banking/banking.yaml");
    let yes = scripted("Yes. transfer_money sends the user to add_payee, and add_payee sends them back to transfer_money.");
    let r = llm_debug_report(&banking, &yes).unwrap();
    assert!(r.model_reports_loop && r.agreement);
    assert!(r.render().contains("Verdict: agreement"));
    assert!(r.render().contains("add_payee -> transfer_money -> add_payee"));

    let r = llm_debug_report(&banking, &scripted("No.")).unwrap();
    assert!(!r.agreement);
    assert!(r.render().contains("MISMATCH"));

    let repaired = load("banking/banking_repaired.yaml");
    let r = llm_debug_report(&repaired, &scripted("No.")).unwrap();
    assert!(r.agreement && !r.model_reports_loop);
}
