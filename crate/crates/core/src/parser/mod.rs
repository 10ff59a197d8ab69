//! Loads ADL source (YAML) into a [`Program`].

mod condition;
mod serialize;

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;

pub use condition::{compile_match_regex, parse_condition, ConditionError};
pub use serialize::to_yaml;

use crate::model::*;
use crate::yaml::{self, Node, NodeKind, ScalarStyle};

#[derive(Debug, Clone)]
pub struct ParseResult {
    pub program: Option<Program>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseResult {
    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(Diagnostic::is_error)
    }
}

const COMMON_FIELDS: &[&str] = &["type", "description", "args", "fallback", "exit"];

struct Ctx<'a> {
    file: &'a str,
    diags: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn loc(&self, node: &Node) -> Location {
        Location::new(self.file, node.line, node.column)
    }

    fn error(&mut self, code: &str, msg: impl Into<String>, node: &Node) {
        let loc = self.loc(node);
        self.diags.push(Diagnostic::error(code, msg, Some(loc)));
    }

    fn warn(&mut self, code: &str, msg: impl Into<String>, node: &Node) {
        let loc = self.loc(node);
        self.diags.push(Diagnostic::warning(code, msg, Some(loc)));
    }
}

/// Parses one ADL document. The program is present iff no error was reported.
pub fn parse_program(source: &str, filename: &str) -> ParseResult {
    let mut ctx = Ctx {
        file: filename,
        diags: Vec::new(),
    };
    let program = parse_root(source, &mut ctx);
    let has_errors = ctx.diags.iter().any(Diagnostic::is_error);
    ParseResult {
        program: if has_errors { None } else { program },
        diagnostics: ctx.diags,
    }
}

/// Reads a program file and the tool scripts it declares (relative to the
/// program's directory), recording the function names they define.
pub fn load_program(path: &Path) -> std::io::Result<ParseResult> {
    let source = std::fs::read_to_string(path)?;
    let mut result = parse_program(&source, &path.display().to_string());
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(program) = result.program.as_mut() {
        program.base_dir = Some(base.clone());
        let mut functions = BTreeSet::new();
        let mut all_read = true;
        for tool in &program.tool_files {
            match std::fs::read_to_string(base.join(tool)) {
                Ok(script) => functions.extend(scan_tool_functions(&script)),
                Err(_) => {
                    all_read = false;
                    result.diagnostics.push(Diagnostic::warning(
                        "W_TOOL_FILE_MISSING",
                        format!("tool script `{tool}` could not be read"),
                        Some(Location::new(&program.file, 0, 0)),
                    ));
                }
            }
        }
        program.functions = all_read.then_some(functions);
    }
    Ok(result)
}

/// Top-level `def name(` definitions of a tool script. Names starting with `_` are private.
pub fn scan_tool_functions(script: &str) -> BTreeSet<String> {
    script
        .lines()
        .filter_map(|line| {
            let rest = line
                .strip_prefix("def ")
                .or_else(|| line.strip_prefix("async def "))?;
            let name: String = rest
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                .collect();
            (!name.is_empty() && !name.starts_with('_') && rest[name.len()..].trim_start().starts_with('('))
                .then_some(name)
        })
        .collect()
}

/// Parse followed by validation, as the `validate` command runs it.
pub fn check_source(source: &str, filename: &str) -> (Option<Program>, Vec<Diagnostic>) {
    let mut result = parse_program(source, filename);
    if let Some(program) = &result.program {
        result.diagnostics.extend(crate::validate::validate_program(program));
    }
    let ok = !result.has_errors();
    (result.program.filter(|_| ok), result.diagnostics)
}

fn parse_root(source: &str, ctx: &mut Ctx) -> Option<Program> {
    let root = match yaml::load(source) {
        Ok(root) => root,
        Err(e) => {
            ctx.diags.push(Diagnostic::error(
                "E_YAML",
                e.message.clone(),
                Some(Location::new(ctx.file, e.line, e.column)),
            ));
            return None;
        }
    };
    let Some(root) = root.filter(|r| !r.is_null()) else {
        ctx.diags.push(Diagnostic::error(
            "E_NO_MAIN",
            "A valid ADL program must contain a main agent",
            Some(Location::new(ctx.file, 1, 1)),
        ));
        return None;
    };
    let Some(entries) = root.as_map() else {
        ctx.error("E_YAML", "top level of an ADL program must be a mapping", &root);
        return None;
    };

    let mut agents: IndexMap<String, AgentDef> = IndexMap::new();
    let mut tool_files = Vec::new();
    let mut tools_seen = false;
    for (key, value) in entries {
        let Some(name) = key.as_str() else {
            ctx.error("E_YAML", "agent names must be scalars", key);
            continue;
        };
        if name == "tools" {
            if tools_seen {
                ctx.warn("W_DUP_TOOLS", "`tools` declared more than once; the last one is used", key);
            }
            tools_seen = true;
            tool_files = parse_tools(value, ctx);
            continue;
        }
        if agents.contains_key(name) {
            ctx.error("E_DUP_AGENT", format!("agent `{name}` is declared more than once"), key);
            continue;
        }
        if let Some(agent) = parse_agent(name, key, value, ctx) {
            agents.insert(name.to_string(), agent);
        }
    }

    if !agents.contains_key(MAIN_AGENT) {
        ctx.diags.push(Diagnostic::error(
            "E_NO_MAIN",
            "A valid ADL program must contain a main agent",
            Some(ctx.loc(&root)),
        ));
    }

    // Policies naming a declared agent are agent references; anything else is prose.
    let names: BTreeSet<String> = agents.keys().cloned().collect();
    for agent in agents.values_mut() {
        for policy in [&mut agent.header.fallback, &mut agent.header.exit]
            .into_iter()
            .flatten()
        {
            if let Policy::Text(text) = policy {
                if names.contains(text.trim()) {
                    *policy = Policy::Agent(text.trim().to_string());
                }
            }
        }
    }

    Some(Program {
        agents,
        tool_files,
        functions: None,
        file: ctx.file.to_string(),
        base_dir: None,
        source: source.to_string(),
    })
}

fn parse_tools(node: &Node, ctx: &mut Ctx) -> Vec<String> {
    let items: Vec<&Node> = match &node.kind {
        NodeKind::Seq(items) => items.iter().collect(),
        NodeKind::Scalar { .. } => vec![node],
        NodeKind::Map(_) => {
            ctx.error("E_BAD_TOOLS", "`tools` must be a list of script file names", node);
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    for item in items {
        match item.as_str().map(str::trim) {
            Some(name) if !name.is_empty() => out.push(name.to_string()),
            _ => ctx.error("E_BAD_TOOLS", "tool script names must be non-empty strings", item),
        }
    }
    out
}

fn parse_kind(text: &str) -> Option<AgentKind> {
    let t = text.trim().to_ascii_lowercase();
    let t = t.strip_suffix(" agent").unwrap_or(&t);
    match t.trim() {
        "kb" => Some(AgentKind::Kb),
        "llm" => Some(AgentKind::Llm),
        "flow" => Some(AgentKind::Flow),
        "ensemble" => Some(AgentKind::Ensemble),
        _ => None,
    }
}

fn scalar_text(node: &Node, what: &str, ctx: &mut Ctx) -> Option<String> {
    match node.as_str() {
        Some(s) => Some(s.to_string()),
        None => {
            ctx.error("E_BAD_FIELD", format!("`{what}` must be a string"), node);
            None
        }
    }
}

fn string_list(node: &Node, what: &str, ctx: &mut Ctx) -> Vec<String> {
    if node.is_null() {
        return Vec::new();
    }
    let Some(items) = node.as_seq() else {
        if let Some(s) = node.as_str() {
            return vec![s.to_string()];
        }
        ctx.error("E_BAD_FIELD", format!("`{what}` must be a list of strings"), node);
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|item| scalar_text(item, what, ctx))
        .collect()
}

fn parse_agent(name: &str, key: &Node, value: &Node, ctx: &mut Ctx) -> Option<AgentDef> {
    let loc = ctx.loc(key);
    let Some(fields) = value.as_map() else {
        ctx.error("E_BAD_AGENT", format!("agent `{name}` must be a mapping"), value);
        return None;
    };
    let kind = match value.get("type") {
        None => {
            ctx.error("E_BAD_TYPE", format!("agent `{name}` has no `type`"), key);
            return None;
        }
        Some(t) => match t.as_str().and_then(parse_kind) {
            Some(k) => k,
            None => {
                ctx.error(
                    "E_BAD_TYPE",
                    format!(
                        "agent `{name}` has type `{}`; expected kb, llm, flow or ensemble agent",
                        t.as_str().unwrap_or("?")
                    ),
                    t,
                );
                return None;
            }
        },
    };

    let mut header = AgentHeader::default();
    if let Some(d) = value.get("description") {
        header.description = scalar_text(d, "description", ctx).map(|s| s.trim().to_string());
    }
    if let Some(a) = value.get("args") {
        let args = string_list(a, "args", ctx);
        let mut seen = BTreeSet::new();
        for arg in args {
            if !seen.insert(arg.clone()) {
                ctx.error("E_DUP_ARG", format!("argument `{arg}` is declared twice in `{name}`"), a);
            } else {
                header.args.push(arg);
            }
        }
    }
    for (field, slot) in [("fallback", &mut header.fallback), ("exit", &mut header.exit)] {
        if let Some(node) = value.get(field) {
            *slot = scalar_text(node, field, ctx).map(|s| Policy::Text(s.trim().to_string()));
        }
    }

    let mut known: Vec<&str> = COMMON_FIELDS.to_vec();
    let body = match kind {
        AgentKind::Kb => {
            known.extend(["sources", "file", "faq"]);
            for forbidden in ["steps", "contains", "uses", "prompt"] {
                if let Some(node) = value.get(forbidden) {
                    ctx.error(
                        "E_KB_NOT_ATOMIC",
                        format!("KB agent `{name}` cannot declare `{forbidden}`; KB agents are atomic"),
                        node,
                    );
                    known.push(forbidden);
                }
            }
            let mut sources: Vec<String> = value
                .get("sources")
                .map(|n| string_list(n, "sources", ctx))
                .unwrap_or_default();
            if let Some(n) = value.get("file") {
                sources.extend(string_list(n, "file", ctx));
            }
            let faq = value.get("faq").map(|n| parse_faq(n, ctx)).unwrap_or_default();
            AgentBody::Kb { sources, faq }
        }
        AgentKind::Llm => {
            known.extend(["prompt", "uses", "steps"]);
            let prompt = match value.get("prompt") {
                Some(p) => scalar_text(p, "prompt", ctx).unwrap_or_default(),
                None => {
                    ctx.error("E_MISSING_FIELD", format!("LLM agent `{name}` needs a `prompt`"), key);
                    String::new()
                }
            };
            let uses = value
                .get("uses")
                .map(|n| string_list(n, "uses", ctx))
                .unwrap_or_default();
            let init_steps = value.get("steps").map(|n| parse_steps(n, ctx));
            AgentBody::Llm {
                prompt,
                uses,
                init_steps,
            }
        }
        AgentKind::Flow => {
            known.push("steps");
            let steps = match value.get("steps") {
                Some(n) => parse_steps(n, ctx),
                None => Vec::new(),
            };
            if steps.is_empty() {
                ctx.error("E_EMPTY_FLOW", format!("flow agent `{name}` needs at least one step"), key);
            }
            let mut subflows = IndexMap::new();
            for (k, v) in fields {
                let Some(field) = k.as_str() else { continue };
                if known.contains(&field) {
                    continue;
                }
                if matches!(v.kind, NodeKind::Seq(_)) {
                    if subflows.contains_key(field) {
                        ctx.error("E_DUP_SUBFLOW", format!("subflow `{field}` declared twice"), k);
                        continue;
                    }
                    subflows.insert(field.to_string(), parse_steps(v, ctx));
                }
            }
            known.extend(subflows.keys().map(String::as_str).collect::<Vec<_>>());
            for (k, v) in fields {
                if let Some(field) = k.as_str() {
                    if !known.contains(&field) && !matches!(v.kind, NodeKind::Seq(_)) {
                        ctx.warn("W_UNKNOWN_FIELD", format!("unknown field `{field}` in `{name}`"), k);
                    }
                }
            }
            return Some(AgentDef {
                name: name.to_string(),
                header,
                body: AgentBody::Flow { steps, subflows },
                loc,
            });
        }
        AgentKind::Ensemble => {
            known.extend(["contains", "policy", "steps"]);
            let contains = match value.get("contains") {
                Some(n) => parse_contains(n, ctx),
                None => Vec::new(),
            };
            if contains.is_empty() {
                ctx.error(
                    "E_EMPTY_ENSEMBLE",
                    format!("ensemble agent `{name}` must contain at least one agent"),
                    key,
                );
            }
            let policy_prompt = value
                .get("policy")
                .and_then(|n| scalar_text(n, "policy", ctx));
            let init_steps = value.get("steps").map(|n| parse_steps(n, ctx));
            AgentBody::Ensemble {
                contains,
                policy_prompt,
                init_steps,
            }
        }
    };
    for (k, _) in fields {
        if let Some(field) = k.as_str() {
            if !known.contains(&field) {
                ctx.warn("W_UNKNOWN_FIELD", format!("unknown field `{field}` in `{name}`"), k);
            }
        }
    }
    Some(AgentDef {
        name: name.to_string(),
        header,
        body,
        loc,
    })
}

fn parse_faq(node: &Node, ctx: &mut Ctx) -> Vec<FaqEntry> {
    let Some(items) = node.as_seq() else {
        ctx.error("E_BAD_FIELD", "`faq` must be a list of {q, a} entries", node);
        return Vec::new();
    };
    let mut out = Vec::new();
    for item in items {
        match (
            item.get("q").and_then(Node::as_str),
            item.get("a").and_then(Node::as_str),
        ) {
            (Some(q), Some(a)) => out.push(FaqEntry {
                q: q.trim().to_string(),
                a: a.trim().to_string(),
            }),
            _ => ctx.error("E_BAD_FIELD", "faq entries need string `q` and `a`", item),
        }
    }
    out
}

fn parse_contains(node: &Node, ctx: &mut Ctx) -> Vec<InvokeSpec> {
    let Some(items) = node.as_seq() else {
        ctx.error("E_BAD_FIELD", "`contains` must be a list of agents", node);
        return Vec::new();
    };
    let mut out = Vec::new();
    for item in items {
        let loc = ctx.loc(item);
        match &item.kind {
            NodeKind::Scalar { value, .. } => out.push(InvokeSpec {
                agent_name: value.trim().to_string(),
                arg_map: Vec::new(),
                loc,
            }),
            NodeKind::Map(entries) if entries.len() == 1 => {
                let (k, v) = &entries[0];
                let Some(agent_name) = k.as_str() else {
                    ctx.error("E_BAD_FIELD", "contained agent name must be a string", k);
                    continue;
                };
                let mut arg_map = Vec::new();
                if let Some(args) = v.get("args") {
                    let mut inner_seen = BTreeSet::new();
                    for (ak, av) in args.as_map().unwrap_or_default() {
                        let (Some(inner), Some(outer)) = (ak.as_str(), av.as_str()) else {
                            ctx.error("E_BAD_FIELD", "argument mappings must be `inner: [ref] outer`", ak);
                            continue;
                        };
                        if !inner_seen.insert(inner.to_string()) {
                            ctx.error("E_DUP_ARG", format!("argument `{inner}` mapped twice"), ak);
                            continue;
                        }
                        let outer = outer.trim();
                        let (by_ref, ensemble_arg) = match outer.strip_prefix("ref ") {
                            Some(rest) => (true, rest.trim()),
                            None => (false, outer),
                        };
                        arg_map.push(ArgMapping {
                            inner_arg: inner.to_string(),
                            by_ref,
                            ensemble_arg: ensemble_arg.to_string(),
                        });
                    }
                } else if !v.is_null() && v.as_map().is_none() {
                    ctx.error("E_BAD_FIELD", "contained agent options must be a mapping", v);
                }
                out.push(InvokeSpec {
                    agent_name: agent_name.to_string(),
                    arg_map,
                    loc,
                });
            }
            _ => ctx.error("E_BAD_FIELD", "invalid `contains` entry", item),
        }
    }
    out
}

fn parse_steps(node: &Node, ctx: &mut Ctx) -> Vec<Step> {
    if node.is_null() {
        return Vec::new();
    }
    let Some(items) = node.as_seq() else {
        ctx.error("E_BAD_STEP", "steps must be a list", node);
        return Vec::new();
    };
    let mut steps: Vec<Step> = Vec::new();
    for item in items {
        let loc = ctx.loc(item);
        match &item.kind {
            NodeKind::Scalar { value, .. } if value.trim() == "user" => {
                steps.push(Step::new(StepKind::User, loc))
            }
            NodeKind::Scalar { value, .. } => {
                ctx.error("E_BAD_STEP", format!("unrecognized step `{value}`"), item)
            }
            NodeKind::Seq(_) => ctx.error("E_BAD_STEP", "a step cannot be a list", item),
            NodeKind::Map(_) => parse_map_step(item, loc, &mut steps, ctx),
        }
    }
    steps
}

fn parse_map_step(item: &Node, loc: Location, steps: &mut Vec<Step>, ctx: &mut Ctx) {
    let has = |k: &str| item.get(k).is_some();
    let kind = if let Some(v) = item.get("bot") {
        match v.as_str() {
            Some(t) => StepKind::Bot {
                template: t.trim().to_string(),
            },
            None => return ctx.error("E_BAD_STEP", "`bot` takes a message string", v),
        }
    } else if let Some(v) = item.get("set") {
        let Some(entries) = v.as_map() else {
            return ctx.error("E_BAD_STEP", "`set` takes a mapping of arg paths to values", v);
        };
        let mut assignments = Vec::new();
        for (k, val) in entries {
            let Some(target) = k.as_str().and_then(ArgPath::parse) else {
                ctx.error("E_BAD_STEP", "`set` targets must be argument paths", k);
                continue;
            };
            if let Some(op) = parse_operand(val, ctx) {
                assignments.push((target, op));
            }
        }
        StepKind::Set { assignments }
    } else if let Some(v) = item.get("label") {
        match v.as_str().map(str::trim).filter(|s| is_identifier(s)) {
            Some(name) => StepKind::Label {
                name: name.to_string(),
            },
            None => return ctx.error("E_BAD_STEP", "`label` takes an identifier", v),
        }
    } else if let Some(v) = item.get("next") {
        let Some(target) = v.as_str().map(str::trim).filter(|s| !s.is_empty()) else {
            return ctx.error("E_BAD_STEP", "`next` takes a label or subflow name", v);
        };
        let tries = match item.get("tries") {
            None => None,
            Some(t) => match t.as_str().and_then(|s| s.trim().parse::<u32>().ok()) {
                Some(n) if n >= 1 => Some(n),
                _ => return ctx.error("E_BAD_STEP", "`tries` must be a positive integer", t),
            },
        };
        StepKind::Next {
            target: target.to_string(),
            tries,
        }
    } else if let Some(v) = item.get("call") {
        let Some(callee) = v.as_str().map(str::trim).filter(|s| !s.is_empty()) else {
            return ctx.error("E_BAD_STEP", "`call` takes an agent or function name", v);
        };
        let mut bindings = Vec::new();
        if let Some(args) = item.get("args") {
            for (k, val) in args.as_map().unwrap_or_default() {
                let Some(param) = k.as_str() else {
                    ctx.error("E_BAD_STEP", "call argument names must be strings", k);
                    continue;
                };
                if let Some(op) = parse_operand(val, ctx) {
                    bindings.push((param.to_string(), op));
                }
            }
        }
        StepKind::Call {
            callee: callee.to_string(),
            bindings,
        }
    } else if let Some(v) = item.get("if") {
        let Some(branch) = parse_branch(v, item, ctx) else {
            return;
        };
        let else_body = item.get("else").map(|e| parse_steps(e, ctx));
        StepKind::Condition {
            branches: vec![branch],
            else_body,
        }
    } else if let Some(v) = item.get("else if") {
        let Some(branch) = parse_branch(v, item, ctx) else {
            return;
        };
        let else_part = item.get("else").map(|e| parse_steps(e, ctx));
        match steps.last_mut().map(|s| &mut s.kind) {
            Some(StepKind::Condition {
                branches,
                else_body: else_body @ None,
            }) => {
                branches.push(branch);
                *else_body = else_part;
            }
            _ => ctx.error("E_BAD_STEP", "`else if` must follow an `if` without an `else`", item),
        }
        return;
    } else if has("else") && item.as_map().is_some_and(|m| m.len() == 1) {
        let body = parse_steps(item.get("else").unwrap(), ctx);
        match steps.last_mut().map(|s| &mut s.kind) {
            Some(StepKind::Condition {
                else_body: else_body @ None,
                ..
            }) => *else_body = Some(body),
            _ => ctx.error("E_BAD_STEP", "`else` must follow an `if`", item),
        }
        return;
    } else if let Some(v) = item.get("return") {
        let Some(text) = v.as_str() else {
            return ctx.error("E_BAD_STEP", "`return` takes `success|error[, message]`", v);
        };
        let (status, message) = match text.split_once(',') {
            Some((s, m)) => (s.trim(), m.trim()),
            None => (text.trim(), ""),
        };
        let status = match status {
            "success" => ReturnStatus::Success,
            "error" => ReturnStatus::Error,
            other => {
                return ctx.error(
                    "E_BAD_STEP",
                    format!("return status must be `success` or `error`, found `{other}`"),
                    v,
                )
            }
        };
        StepKind::Return {
            status,
            message: message.to_string(),
        }
    } else {
        let keys: Vec<&str> = item
            .as_map()
            .unwrap_or_default()
            .iter()
            .filter_map(|(k, _)| k.as_str())
            .collect();
        return ctx.error(
            "E_BAD_STEP",
            format!("unrecognized step with keys [{}]", keys.join(", ")),
            item,
        );
    };
    steps.push(Step::new(kind, loc));
}

fn parse_branch(cond: &Node, item: &Node, ctx: &mut Ctx) -> Option<Branch> {
    let Some(text) = cond.as_str() else {
        ctx.error("E_BAD_STEP", "conditions must be strings", cond);
        return None;
    };
    let condition = match parse_condition(text) {
        Ok(c) => c,
        Err(e) => {
            ctx.error(e.code(), e.to_string(), cond);
            return None;
        }
    };
    let body = match item.get("then") {
        Some(t) => parse_steps(t, ctx),
        None => {
            ctx.error("E_BAD_STEP", "condition is missing `then`", item);
            return None;
        }
    };
    Some(Branch {
        condition,
        source: text.trim().to_string(),
        body,
    })
}

/// Quoted scalars are literals; plain identifier paths are argument references.
fn parse_operand(node: &Node, ctx: &mut Ctx) -> Option<Operand> {
    match &node.kind {
        NodeKind::Scalar { value, style } => Some(match style {
            ScalarStyle::Plain => match yaml::plain_scalar(value) {
                serde_json::Value::String(s) => match ArgPath::parse(&s) {
                    Some(path) => Operand::Path(path),
                    None => Operand::Literal(serde_json::Value::String(s)),
                },
                other => Operand::Literal(other),
            },
            _ => Operand::Literal(serde_json::Value::String(value.clone())),
        }),
        NodeKind::Seq(items) => {
            let mut out = Vec::new();
            for item in items {
                match &item.kind {
                    NodeKind::Scalar { value, style } => out.push(match style {
                        ScalarStyle::Plain => yaml::plain_scalar(value),
                        _ => serde_json::Value::String(value.clone()),
                    }),
                    _ => {
                        ctx.error("E_BAD_VALUE", "list values may only contain scalars", item);
                        return None;
                    }
                }
            }
            Some(Operand::Literal(serde_json::Value::Array(out)))
        }
        NodeKind::Map(_) => {
            ctx.error("E_BAD_VALUE", "nested mappings are not allowed as values", node);
            None
        }
    }
}
