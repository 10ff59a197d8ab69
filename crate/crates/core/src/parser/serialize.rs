//! Pretty-printer producing ADL source that parses back to the same program.

use std::fmt::Write;

use crate::model::*;

/// Serializes a program. `parse(to_yaml(p))` equals `p` modulo locations.
pub fn to_yaml(program: &Program) -> String {
    let mut out = String::new();
    if !program.tool_files.is_empty() {
        out.push_str("tools:\n");
        for t in &program.tool_files {
            let _ = writeln!(out, "  - {}", q(t));
        }
    }
    for agent in program.agents.values() {
        write_agent(&mut out, agent);
    }
    out
}

fn q(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn pad(n: usize) -> String {
    " ".repeat(n)
}

fn policy_text(p: &Policy) -> &str {
    match p {
        Policy::Agent(s) | Policy::Text(s) => s,
    }
}

fn write_agent(out: &mut String, agent: &AgentDef) {
    let _ = writeln!(out, "{}:", q(&agent.name));
    let _ = writeln!(out, "  type: {}", agent.kind().type_name());
    let h = &agent.header;
    if let Some(d) = &h.description {
        let _ = writeln!(out, "  description: {}", q(d));
    }
    if !h.args.is_empty() {
        out.push_str("  args:\n");
        for a in &h.args {
            let _ = writeln!(out, "    - {}", q(a));
        }
    }
    if let Some(p) = &h.fallback {
        let _ = writeln!(out, "  fallback: {}", q(policy_text(p)));
    }
    if let Some(p) = &h.exit {
        let _ = writeln!(out, "  exit: {}", q(policy_text(p)));
    }
    match &agent.body {
        AgentBody::Kb { sources, faq } => {
            if !sources.is_empty() {
                out.push_str("  sources:\n");
                for s in sources {
                    let _ = writeln!(out, "    - {}", q(s));
                }
            }
            if !faq.is_empty() {
                out.push_str("  faq:\n");
                for e in faq {
                    let _ = writeln!(out, "    - q: {}\n      a: {}", q(&e.q), q(&e.a));
                }
            }
        }
        AgentBody::Llm {
            prompt,
            uses,
            init_steps,
        } => {
            let _ = writeln!(out, "  prompt: {}", q(prompt));
            if !uses.is_empty() {
                out.push_str("  uses:\n");
                for u in uses {
                    let _ = writeln!(out, "    - {}", q(u));
                }
            }
            if let Some(steps) = init_steps {
                write_block(out, "steps", steps, 2);
            }
        }
        AgentBody::Flow { steps, subflows } => {
            write_block(out, "steps", steps, 2);
            for (name, body) in subflows {
                write_block(out, &q(name), body, 2);
            }
        }
        AgentBody::Ensemble {
            contains,
            policy_prompt,
            init_steps,
        } => {
            out.push_str("  contains:\n");
            for c in contains {
                if c.arg_map.is_empty() {
                    let _ = writeln!(out, "    - {}", q(&c.agent_name));
                } else {
                    let _ = writeln!(out, "    - {}:\n        args:", q(&c.agent_name));
                    for m in &c.arg_map {
                        let target = if m.by_ref {
                            format!("ref {}", m.ensemble_arg)
                        } else {
                            m.ensemble_arg.clone()
                        };
                        let _ = writeln!(out, "          {}: {}", q(&m.inner_arg), q(&target));
                    }
                }
            }
            if let Some(p) = policy_prompt {
                let _ = writeln!(out, "  policy: {}", q(p));
            }
            if let Some(steps) = init_steps {
                write_block(out, "steps", steps, 2);
            }
        }
    }
}

fn write_block(out: &mut String, key: &str, steps: &[Step], indent: usize) {
    if steps.is_empty() {
        let _ = writeln!(out, "{}{key}: []", pad(indent));
        return;
    }
    let _ = writeln!(out, "{}{key}:", pad(indent));
    write_steps(out, steps, indent + 2);
}

fn operand(op: &Operand) -> String {
    match op {
        Operand::Path(p) => p.to_string(),
        Operand::Literal(Value::String(s)) => q(s),
        Operand::Literal(Value::Array(items)) => {
            let parts: Vec<String> = items
                .iter()
                .map(|v| match v {
                    Value::String(s) => q(s),
                    other => other.to_string(),
                })
                .collect();
            format!("[{}]", parts.join(", "))
        }
        Operand::Literal(other) => other.to_string(),
    }
}

fn write_steps(out: &mut String, steps: &[Step], indent: usize) {
    let p = pad(indent);
    for step in steps {
        match &step.kind {
            StepKind::User => {
                let _ = writeln!(out, "{p}- user");
            }
            StepKind::Bot { template } => {
                let _ = writeln!(out, "{p}- bot: {}", q(template));
            }
            StepKind::Set { assignments } => {
                let _ = writeln!(out, "{p}- set:");
                for (path, op) in assignments {
                    let _ = writeln!(out, "{p}    {}: {}", q(&path.to_string()), operand(op));
                }
            }
            StepKind::Label { name } => {
                let _ = writeln!(out, "{p}- label: {}", q(name));
            }
            StepKind::Next { target, tries } => {
                let _ = writeln!(out, "{p}- next: {}", q(target));
                if let Some(n) = tries {
                    let _ = writeln!(out, "{p}  tries: {n}");
                }
            }
            StepKind::Call { callee, bindings } => {
                let _ = writeln!(out, "{p}- call: {}", q(callee));
                if !bindings.is_empty() {
                    let _ = writeln!(out, "{p}  args:");
                    for (name, op) in bindings {
                        let _ = writeln!(out, "{p}    {}: {}", q(name), operand(op));
                    }
                }
            }
            StepKind::Condition {
                branches,
                else_body,
            } => {
                for (i, b) in branches.iter().enumerate() {
                    let key = if i == 0 { "if" } else { "else if" };
                    let _ = writeln!(out, "{p}- {key}: {}", q(&b.source));
                    write_block(out, "then", &b.body, indent + 2);
                }
                if let Some(body) = else_body {
                    if body.is_empty() {
                        let _ = writeln!(out, "{p}- else: []");
                    } else {
                        let _ = writeln!(out, "{p}- else:");
                        write_steps(out, body, indent + 4);
                    }
                }
            }
            StepKind::Return { status, message } => {
                let text = if message.is_empty() {
                    status.as_str().to_string()
                } else {
                    format!("{status}, {message}")
                };
                let _ = writeln!(out, "{p}- return: {}", q(&text));
            }
        }
    }
}
