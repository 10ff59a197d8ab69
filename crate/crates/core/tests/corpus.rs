use std::path::{Path, PathBuf};

use adl_core::parser::to_yaml;
use adl_core::{load_program, parse_program, validate_program, AgentBody, Diagnostic, Program};

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn load(rel: &str) -> (Program, Vec<Diagnostic>) {
    let parsed = load_program(&corpus(rel)).unwrap();
    let mut diags = parsed.diagnostics;
    let program = parsed.program.unwrap_or_else(|| panic!("{rel}: {diags:#?}"));
    diags.extend(validate_program(&program));
    (program, diags)
}

fn errors(diags: &[Diagnostic]) -> Vec<&Diagnostic> {
    diags.iter().filter(|d| d.is_error()).collect()
}

#[test]
fn bookstore_shape() {
    let (p, diags) = load("bookstore/bookstore.yaml");
    assert!(errors(&diags).is_empty(), "{diags:#?}");
    assert_eq!(p.agents.len(), 5);
    let AgentBody::Flow { subflows, .. } = &p.agent("order").unwrap().body else {
        panic!("order is not a flow agent");
    };
    assert!(subflows.contains_key("start_ordering_operation"));
}

#[test]
fn banking_shape() {
    let (p, diags) = load("banking/banking.yaml");
    assert!(errors(&diags).is_empty(), "{diags:#?}");
    assert_eq!(p.agents.len(), 10);
    assert_eq!(p.agent("meta").unwrap().contains().len(), 7);
    let AgentBody::Kb { sources, .. } = &p.agent("kb").unwrap().body else {
        panic!("kb is not a KB agent");
    };
    assert_eq!(sources, &["path/to/docs"]);
}

#[test]
fn serialize_round_trip_is_a_fixed_point() {
    for rel in [
        "bookstore/bookstore.yaml",
        "bookstore/bookstore_discount.yaml",
        "banking/banking.yaml",
        "banking/banking_repaired.yaml",
    ] {
        let (p, _) = load(rel);
        let text = to_yaml(&p);
        let again = parse_program(&text, "round.yaml");
        let q = again.program.unwrap_or_else(|| panic!("{rel}: {:#?}\n{text}", again.diagnostics));
        assert_eq!(
            p.without_locations().agents,
            q.without_locations().agents,
            "{rel} changed after a round trip"
        );
        assert_eq!(to_yaml(&q), text, "{rel}: serialization is not stable");
    }
}

#[test]
fn invalid_fixtures_report_one_code_each() {
    for (file, code) in [
        ("missing_main.yaml", "E_NO_MAIN"),
        ("dup_label.yaml", "E_DUP_LABEL"),
        ("undefined_next.yaml", "E_UNDEF_TARGET"),
        ("unknown_callee.yaml", "E_UNDEF_AGENT"),
        ("kb_with_steps.yaml", "E_KB_NOT_ATOMIC"),
        ("label_shadows_subflow.yaml", "E_LABEL_SHADOWS_SUBFLOW"),
    ] {
        let source = std::fs::read_to_string(corpus(&format!("invalid/{file}"))).unwrap();
        let codes: Vec<_> = adl_core::check_source(&source, file)
            .1
            .into_iter()
            .filter(|d| d.is_error())
            .map(|d| d.code)
            .collect();
        assert_eq!(codes, [code], "{file}");
    }
}

#[test]
fn deleting_a_jump_label_is_caught() {
    let source = std::fs::read_to_string(corpus("bookstore/bookstore.yaml")).unwrap();
    let mutated = source.replace("    - label: confirm_books\n", "");
    assert_ne!(mutated, source);
    let codes: Vec<_> = adl_core::check_source(&mutated, "bookstore.yaml")
        .1
        .into_iter()
        .filter(|d| d.is_error())
        .map(|d| d.code)
        .collect();
    assert!(!codes.is_empty());
    assert!(codes.iter().all(|c| c == "E_UNDEF_TARGET"), "{codes:?}");
}
