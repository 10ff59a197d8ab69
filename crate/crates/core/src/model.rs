//! Abstract syntax and data model for ADL programs.
//!
//! A [`Program`] is immutable once parsed. Runtime state lives in
//! [`crate::runtime`], never in the model.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Argument values. `Value::Null` doubles as the "uninitialized" marker.
pub type Value = serde_json::Value;

/// Name of the mandatory entry agent.
pub const MAIN_AGENT: &str = "main";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub file: String,
    pub line: usize,
    pub column: usize,
}

impl Location {
    pub fn new(file: impl Into<String>, line: usize, column: usize) -> Self {
        Self {
            file: file.into(),
            line,
            column,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    pub location: Option<Location>,
}

impl Diagnostic {
    pub fn error(code: &str, message: impl Into<String>, location: Option<Location>) -> Self {
        Self {
            severity: Severity::Error,
            code: code.to_string(),
            message: message.into(),
            location,
        }
    }

    pub fn warning(code: &str, message: impl Into<String>, location: Option<Location>) -> Self {
        Self {
            severity: Severity::Warning,
            code: code.to_string(),
            message: message.into(),
            location,
        }
    }

    pub fn info(code: &str, message: impl Into<String>, location: Option<Location>) -> Self {
        Self {
            severity: Severity::Info,
            code: code.to_string(),
            message: message.into(),
            location,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// Renders as `file:line:col: severity[CODE]: message`.
impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.location {
            Some(loc) => write!(f, "{loc}: ")?,
            None => write!(f, "<unknown>:0:0: ")?,
        }
        write!(f, "{}[{}]: {}", self.severity, self.code, self.message)
    }
}

/// `[agent_name.]arg_name`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArgPath {
    pub owner: Option<String>,
    pub arg: String,
}

impl ArgPath {
    pub fn bare(arg: impl Into<String>) -> Self {
        Self {
            owner: None,
            arg: arg.into(),
        }
    }

    pub fn qualified(owner: impl Into<String>, arg: impl Into<String>) -> Self {
        Self {
            owner: Some(owner.into()),
            arg: arg.into(),
        }
    }

    /// Parses `owner.arg` or `arg`. Returns `None` for anything that is not an identifier path.
    pub fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        let mut parts = text.split('.');
        let first = parts.next()?;
        let second = parts.next();
        if parts.next().is_some() || !is_identifier(first) {
            return None;
        }
        match second {
            None => Some(Self::bare(first)),
            Some(arg) if is_identifier(arg) => Some(Self::qualified(first, arg)),
            Some(_) => None,
        }
    }

    /// Bare paths resolve to `current_agent`; qualified paths pass through.
    pub fn resolve(&self, current_agent: &str) -> (String, String) {
        let owner = self.owner.as_deref().unwrap_or(current_agent);
        (owner.to_string(), self.arg.clone())
    }
}

impl fmt::Display for ArgPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.owner {
            Some(owner) => write!(f, "{owner}.{}", self.arg),
            None => f.write_str(&self.arg),
        }
    }
}

pub fn resolve_arg_path(path: &ArgPath, current_agent: &str) -> (String, String) {
    path.resolve(current_agent)
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Right-hand side of `set` / `call args` bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Literal(Value),
    Path(ArgPath),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnStatus {
    Success,
    Error,
}

impl ReturnStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReturnStatus::Success => "success",
            ReturnStatus::Error => "error",
        }
    }
}

impl fmt::Display for ReturnStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareOp {
    Eq,
    Neq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompareRhs {
    Literal(Value),
    NoneMarker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConditionExpr {
    NaturalLanguage { text: String },
    Compare { path: ArgPath, op: CompareOp, rhs: CompareRhs },
    RegexMatch { pattern: String, path: ArgPath },
    And(Box<ConditionExpr>, Box<ConditionExpr>),
    Or(Box<ConditionExpr>, Box<ConditionExpr>),
}

impl ConditionExpr {
    pub fn is_natural_language(&self) -> bool {
        matches!(self, ConditionExpr::NaturalLanguage { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub condition: ConditionExpr,
    /// Source text of the condition, kept for prompts and re-serialization.
    pub source: String,
    pub body: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepKind {
    User,
    Bot { template: String },
    Set { assignments: Vec<(ArgPath, Operand)> },
    Label { name: String },
    Next { target: String, tries: Option<u32> },
    Call { callee: String, bindings: Vec<(String, Operand)> },
    Condition { branches: Vec<Branch>, else_body: Option<Vec<Step>> },
    Return { status: ReturnStatus, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub kind: StepKind,
    pub loc: Location,
}

impl Step {
    pub fn new(kind: StepKind, loc: Location) -> Self {
        Self { kind, loc }
    }
}

/// Either the name of a declared agent or a natural-language policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    Agent(String),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentHeader {
    pub description: Option<String>,
    pub args: Vec<String>,
    pub fallback: Option<Policy>,
    pub exit: Option<Policy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaqEntry {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgMapping {
    pub inner_arg: String,
    pub by_ref: bool,
    pub ensemble_arg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvokeSpec {
    pub agent_name: String,
    pub arg_map: Vec<ArgMapping>,
    pub loc: Location,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AgentBody {
    Kb {
        sources: Vec<String>,
        faq: Vec<FaqEntry>,
    },
    Llm {
        prompt: String,
        uses: Vec<String>,
        init_steps: Option<Vec<Step>>,
    },
    Flow {
        steps: Vec<Step>,
        subflows: IndexMap<String, Vec<Step>>,
    },
    Ensemble {
        contains: Vec<InvokeSpec>,
        policy_prompt: Option<String>,
        init_steps: Option<Vec<Step>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Kb,
    Llm,
    Flow,
    Ensemble,
}

impl AgentKind {
    pub fn type_name(self) -> &'static str {
        match self {
            AgentKind::Kb => "kb agent",
            AgentKind::Llm => "llm agent",
            AgentKind::Flow => "flow agent",
            AgentKind::Ensemble => "ensemble agent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDef {
    pub name: String,
    pub header: AgentHeader,
    pub body: AgentBody,
    pub loc: Location,
}

impl AgentDef {
    pub fn kind(&self) -> AgentKind {
        match self.body {
            AgentBody::Kb { .. } => AgentKind::Kb,
            AgentBody::Llm { .. } => AgentKind::Llm,
            AgentBody::Flow { .. } => AgentKind::Flow,
            AgentBody::Ensemble { .. } => AgentKind::Ensemble,
        }
    }

    pub fn description(&self) -> &str {
        self.header.description.as_deref().unwrap_or("")
    }

    /// Initialization steps of LLM and ensemble agents.
    pub fn init_steps(&self) -> Option<&[Step]> {
        match &self.body {
            AgentBody::Llm { init_steps, .. } | AgentBody::Ensemble { init_steps, .. } => {
                init_steps.as_deref()
            }
            _ => None,
        }
    }

    pub fn contains(&self) -> &[InvokeSpec] {
        match &self.body {
            AgentBody::Ensemble { contains, .. } => contains,
            _ => &[],
        }
    }

    /// Every step block owned by this agent, with its block name
    /// (`steps` for main/init steps, the subflow name otherwise).
    pub fn step_blocks(&self) -> Vec<(&str, &[Step])> {
        match &self.body {
            AgentBody::Flow { steps, subflows } => {
                let mut blocks: Vec<(&str, &[Step])> = vec![("steps", steps.as_slice())];
                blocks.extend(subflows.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
                blocks
            }
            AgentBody::Llm {
                init_steps: Some(s),
                ..
            }
            | AgentBody::Ensemble {
                init_steps: Some(s),
                ..
            } => vec![("steps", s.as_slice())],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub agents: IndexMap<String, AgentDef>,
    pub tool_files: Vec<String>,
    /// Function names discovered in the tool scripts; `None` when the scripts were not read.
    pub functions: Option<BTreeSet<String>>,
    pub file: String,
    /// Directory the program was loaded from; relative source and tool paths resolve against it.
    pub base_dir: Option<PathBuf>,
    /// Original source text.
    pub source: String,
}

impl Program {
    pub fn agent(&self, name: &str) -> Option<&AgentDef> {
        self.agents.get(name)
    }

    pub fn main(&self) -> &AgentDef {
        self.agents
            .get(MAIN_AGENT)
            .expect("program invariant: main agent exists")
    }

    pub fn is_function(&self, name: &str) -> bool {
        self.functions
            .as_ref()
            .is_some_and(|set| set.contains(name))
    }

    /// Copy with every source location cleared; used for structural comparisons.
    pub fn without_locations(&self) -> Program {
        let mut p = self.clone();
        for agent in p.agents.values_mut() {
            agent.loc = Location::default();
            match &mut agent.body {
                AgentBody::Flow { steps, subflows } => {
                    strip_steps(steps);
                    subflows.values_mut().for_each(|s| strip_steps(s));
                }
                AgentBody::Llm { init_steps, .. } => {
                    if let Some(s) = init_steps {
                        strip_steps(s);
                    }
                }
                AgentBody::Ensemble {
                    contains,
                    init_steps,
                    ..
                } => {
                    contains.iter_mut().for_each(|c| c.loc = Location::default());
                    if let Some(s) = init_steps {
                        strip_steps(s);
                    }
                }
                AgentBody::Kb { .. } => {}
            }
        }
        p.file.clear();
        p.source.clear();
        p.base_dir = None;
        p
    }
}

fn strip_steps(steps: &mut [Step]) {
    for step in steps {
        step.loc = Location::default();
        if let StepKind::Condition {
            branches,
            else_body,
        } = &mut step.kind
        {
            for b in branches.iter_mut() {
                strip_steps(&mut b.body);
            }
            if let Some(e) = else_body {
                strip_steps(e);
            }
        }
    }
}

/// Renders a value the way flows interpolate it: lists joined with ", ", None as "".
pub fn render_value(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::Bool(true) => "True".to_string(),
        Value::Bool(false) => "False".to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(render_value)
            .collect::<Vec<_>>()
            .join(", "),
        Value::Object(_) => value.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_path_resolves_to_current_agent() {
        let p = ArgPath::parse("billing_address").unwrap();
        assert_eq!(
            resolve_arg_path(&p, "delivery"),
            ("delivery".into(), "billing_address".into())
        );
    }

    #[test]
    fn qualified_paths_pass_through() {
        let p = ArgPath::parse("shopping_agent.billing_address").unwrap();
        assert_eq!(
            p.resolve("anything"),
            ("shopping_agent".into(), "billing_address".into())
        );
        let p = ArgPath::parse("place_order.status").unwrap();
        assert_eq!(p.resolve("order"), ("place_order".into(), "status".into()));
        assert_eq!(p.to_string(), "place_order.status");
    }

    #[test]
    fn non_paths_are_rejected() {
        assert!(ArgPath::parse("Mary Brown").is_none());
        assert!(ArgPath::parse("a.b.c").is_none());
        assert!(ArgPath::parse("1abc").is_none());
        assert!(ArgPath::parse("").is_none());
    }

    #[test]
    fn step_kinds_are_exhaustive() {
        fn tag(k: &StepKind) -> &'static str {
            match k {
                StepKind::User => "user",
                StepKind::Bot { .. } => "bot",
                StepKind::Set { .. } => "set",
                StepKind::Label { .. } => "label",
                StepKind::Next { .. } => "next",
                StepKind::Call { .. } => "call",
                StepKind::Condition { .. } => "condition",
                StepKind::Return { .. } => "return",
            }
        }
        let all = [
            StepKind::User,
            StepKind::Bot {
                template: "hi".into(),
            },
            StepKind::Set {
                assignments: vec![(ArgPath::bare("x"), Operand::Literal(Value::from(1)))],
            },
            StepKind::Label { name: "l".into() },
            StepKind::Next {
                target: "l".into(),
                tries: Some(3),
            },
            StepKind::Call {
                callee: "f".into(),
                bindings: vec![("a".into(), Operand::Path(ArgPath::bare("b")))],
            },
            StepKind::Condition {
                branches: vec![Branch {
                    condition: ConditionExpr::NaturalLanguage { text: "t".into() },
                    source: "t".into(),
                    body: vec![],
                }],
                else_body: None,
            },
            StepKind::Return {
                status: ReturnStatus::Error,
                message: "m".into(),
            },
        ];
        let tags: BTreeSet<_> = all.iter().map(tag).collect();
        assert_eq!(tags.len(), 8);
        for k in &all {
            let step = Step::new(k.clone(), Location::new("f", 1, 1));
            assert_eq!(&step.kind, k);
        }
    }

    #[test]
    fn diagnostic_rendering() {
        let d = Diagnostic::error("E_DUP_LABEL", "duplicate label `retry`", Some(Location::new("a.yaml", 4, 7)));
        assert_eq!(d.to_string(), "a.yaml:4:7: error[E_DUP_LABEL]: duplicate label `retry`");
    }

    #[test]
    fn value_rendering() {
        assert_eq!(render_value(&serde_json::json!(["Dune", "Emma"])), "Dune, Emma");
        assert_eq!(render_value(&Value::Null), "");
        assert_eq!(render_value(&Value::Bool(true)), "True");
    }
}
