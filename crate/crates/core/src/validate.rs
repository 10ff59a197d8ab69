//! Cross-reference checks over a parsed program.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::*;

pub fn validate_program(program: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for agent in program.agents.values() {
        check_header(program, agent, &mut out);
        check_blocks(program, agent, &mut out);
        check_contains(program, agent, &mut out);
        check_uses(program, agent, &mut out);
    }
    out
}

fn check_header(program: &Program, agent: &AgentDef, out: &mut Vec<Diagnostic>) {
    if agent.name != MAIN_AGENT && agent.description().trim().is_empty() {
        out.push(Diagnostic::warning(
            "W_NO_DESCRIPTION",
            format!("agent `{}` has no description", agent.name),
            Some(agent.loc.clone()),
        ));
    }
    if let AgentBody::Kb { sources, faq } = &agent.body {
        if sources.is_empty() && faq.is_empty() {
            out.push(Diagnostic::warning(
                "W_EMPTY_KB",
                format!("KB agent `{}` has neither sources nor faq", agent.name),
                Some(agent.loc.clone()),
            ));
        }
    }
    for policy in [&agent.header.fallback, &agent.header.exit].into_iter().flatten() {
        if let Policy::Agent(target) = policy {
            if program.agent(target).is_some_and(|a| a.kind() == AgentKind::Kb)
                && agent.kind() == AgentKind::Kb
            {
                out.push(Diagnostic::error(
                    "E_KB_NOT_ATOMIC",
                    format!("KB agent `{}` cannot hand over to `{target}`", agent.name),
                    Some(agent.loc.clone()),
                ));
            }
        }
    }
}

/// Every step of a block, including nested condition bodies, in document order.
pub fn walk_steps<'a>(steps: &'a [Step], f: &mut dyn FnMut(&'a Step)) {
    for step in steps {
        f(step);
        if let StepKind::Condition {
            branches,
            else_body,
        } = &step.kind
        {
            for b in branches {
                walk_steps(&b.body, f);
            }
            if let Some(e) = else_body {
                walk_steps(e, f);
            }
        }
    }
}

fn check_blocks(program: &Program, agent: &AgentDef, out: &mut Vec<Diagnostic>) {
    let blocks = agent.step_blocks();
    let subflows: BTreeSet<&str> = blocks.iter().skip(1).map(|(n, _)| *n).collect();
    let is_flow = agent.kind() == AgentKind::Flow;

    let mut labels: BTreeMap<&str, &Step> = BTreeMap::new();
    for (_, steps) in &blocks {
        walk_steps(steps, &mut |step| {
            if let StepKind::Label { name } = &step.kind {
                if labels.contains_key(name.as_str()) {
                    out.push(Diagnostic::error(
                        "E_DUP_LABEL",
                        format!("label `{name}` is declared more than once in `{}`", agent.name),
                        Some(step.loc.clone()),
                    ));
                } else {
                    labels.insert(name, step);
                }
                if subflows.contains(name.as_str()) {
                    out.push(Diagnostic::error(
                        "E_LABEL_SHADOWS_SUBFLOW",
                        format!("label `{name}` cannot share a name with a subflow of `{}`", agent.name),
                        Some(step.loc.clone()),
                    ));
                }
            }
        });
    }

    for (_, steps) in &blocks {
        walk_steps(steps, &mut |step| match &step.kind {
            StepKind::Next { target, .. } => {
                if !labels.contains_key(target.as_str()) && !subflows.contains(target.as_str()) {
                    out.push(Diagnostic::error(
                        "E_UNDEF_TARGET",
                        format!(
                            "`next: {target}` names neither a label nor a subflow of `{}`",
                            agent.name
                        ),
                        Some(step.loc.clone()),
                    ));
                }
            }
            StepKind::Call { callee, .. } => check_callee(program, agent, callee, step, out),
            StepKind::User if !is_flow => out.push(Diagnostic::error(
                "E_USER_IN_INIT",
                format!("initialization steps of `{}` cannot wait for the user", agent.name),
                Some(step.loc.clone()),
            )),
            _ => {}
        });
        check_unreachable(steps, out);
    }
}

fn check_callee(
    program: &Program,
    agent: &AgentDef,
    callee: &str,
    step: &Step,
    out: &mut Vec<Diagnostic>,
) {
    if let Some(target) = program.agent(callee) {
        if target.kind() == AgentKind::Kb && agent.kind() == AgentKind::Kb {
            out.push(Diagnostic::error(
                "E_KB_NOT_ATOMIC",
                "KB agents cannot call other agents",
                Some(step.loc.clone()),
            ));
        }
        return;
    }
    if program.is_function(callee) {
        return;
    }
    if program.functions.is_none() && !program.tool_files.is_empty() {
        out.push(Diagnostic::warning(
            "W_UNVERIFIED_CALLEE",
            format!("`{callee}` is not an agent; assuming it is defined by a tool script"),
            Some(step.loc.clone()),
        ));
        return;
    }
    out.push(Diagnostic::error(
        "E_UNDEF_AGENT",
        format!("`{callee}` is neither a declared agent nor a known function"),
        Some(step.loc.clone()),
    ));
}

fn check_contains(program: &Program, agent: &AgentDef, out: &mut Vec<Diagnostic>) {
    let mut seen = BTreeSet::new();
    for spec in agent.contains() {
        if !seen.insert(spec.agent_name.as_str()) {
            out.push(Diagnostic::warning(
                "W_DUP_CONTAINS",
                format!("`{}` is listed twice in `{}`", spec.agent_name, agent.name),
                Some(spec.loc.clone()),
            ));
        }
        let Some(inner) = program.agent(&spec.agent_name) else {
            out.push(Diagnostic::error(
                "E_UNDEF_AGENT",
                format!("`{}` contains undeclared agent `{}`", agent.name, spec.agent_name),
                Some(spec.loc.clone()),
            ));
            continue;
        };
        if inner.name == agent.name {
            out.push(Diagnostic::error(
                "E_SELF_CONTAINS",
                format!("ensemble `{}` cannot contain itself", agent.name),
                Some(spec.loc.clone()),
            ));
        }
        for m in &spec.arg_map {
            if !agent.header.args.contains(&m.ensemble_arg) {
                out.push(Diagnostic::error(
                    "E_UNDEF_ARG",
                    format!(
                        "`{}` maps `{}` to `{}`, which `{}` does not declare",
                        agent.name, m.inner_arg, m.ensemble_arg, agent.name
                    ),
                    Some(spec.loc.clone()),
                ));
            }
            if !inner.header.args.contains(&m.inner_arg) {
                out.push(Diagnostic::warning(
                    "W_UNDECLARED_ARG",
                    format!("`{}` does not declare argument `{}`", inner.name, m.inner_arg),
                    Some(spec.loc.clone()),
                ));
            }
        }
    }
}

fn check_uses(program: &Program, agent: &AgentDef, out: &mut Vec<Diagnostic>) {
    let AgentBody::Llm { uses, .. } = &agent.body else {
        return;
    };
    for name in uses {
        let known = match &program.functions {
            Some(set) => set.contains(name),
            None => !program.tool_files.is_empty(),
        };
        if !known {
            out.push(Diagnostic::warning(
                "W_UNUSED_TOOL",
                format!("`{}` uses `{name}`, which no tool script defines", agent.name),
                Some(agent.loc.clone()),
            ));
        }
    }
}

/// Steps following an unconditional `return` or `next` (no `tries`) never run.
fn check_unreachable(steps: &[Step], out: &mut Vec<Diagnostic>) {
    for (i, step) in steps.iter().enumerate() {
        match &step.kind {
            StepKind::Return { .. } | StepKind::Next { tries: None, .. } => {
                if let Some(next) = steps.get(i + 1) {
                    out.push(Diagnostic::warning(
                        "W_UNREACHABLE",
                        "step can never be reached",
                        Some(next.loc.clone()),
                    ));
                }
                return;
            }
            StepKind::Condition {
                branches,
                else_body,
            } => {
                for b in branches {
                    check_unreachable(&b.body, out);
                }
                if let Some(e) = else_body {
                    check_unreachable(e, out);
                }
            }
            _ => {}
        }
    }
}
