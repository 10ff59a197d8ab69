use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{AgentKind, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
}

/// Which list of steps a cursor level indexes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Body {
    Block,
    Branch(usize),
    Else,
}

/// Position inside a step block. Level `k > 0` indexes into a body of the
/// condition step addressed by level `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Cursor {
    pub block: String,
    pub path: Vec<(Body, usize)>,
}

impl Cursor {
    pub fn start(block: &str) -> Self {
        Self {
            block: block.to_string(),
            path: vec![(Body::Block, 0)],
        }
    }

    /// Stable identifier of the step at this position.
    pub fn site(&self) -> String {
        let mut s = self.block.clone();
        for (body, idx) in &self.path {
            match body {
                Body::Block => s.push_str(&format!("/{idx}")),
                Body::Branch(b) => s.push_str(&format!("/b{b}/{idx}")),
                Body::Else => s.push_str(&format!("/e/{idx}")),
            }
        }
        s
    }

    pub fn advance(&mut self) {
        if let Some(last) = self.path.last_mut() {
            last.1 += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Init,
    Running,
    WaitingUser,
    AwaitingChild,
    Respond,
    Idle,
}

/// Two-way binding between an inner agent's argument and its ensemble's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RefLink {
    pub inner: (String, String),
    pub outer: (String, String),
}

#[derive(Debug, Clone)]
pub(crate) struct Activation {
    pub agent: String,
    pub kind: AgentKind,
    pub phase: Phase,
    pub cursor: Option<Cursor>,
    pub last_user: Option<Cursor>,
    pub tries: HashMap<String, u32>,
    pub ref_links: Vec<RefLink>,
    /// Ensembles: agent that handled the previous input.
    pub last_handler: Option<String>,
}

impl Activation {
    pub fn new(agent: &str, kind: AgentKind) -> Self {
        Self {
            agent: agent.to_string(),
            kind,
            phase: Phase::Init,
            cursor: None,
            last_user: None,
            tries: HashMap::new(),
            ref_links: Vec::new(),
            last_handler: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct SessionState {
    pub stack: Vec<Activation>,
    pub args: BTreeMap<String, BTreeMap<String, Value>>,
    pub transcript: Vec<TranscriptEntry>,
    pub terminated: Option<(crate::model::ReturnStatus, String)>,
}

impl SessionState {
    pub fn get(&self, owner: &str, arg: &str) -> Value {
        self.args
            .get(owner)
            .and_then(|m| m.get(arg))
            .cloned()
            .unwrap_or(Value::Null)
    }

    /// Every `(owner, arg)` pair linked to `(owner, arg)` through active ref links.
    pub fn linked(&self, owner: &str, arg: &str) -> Vec<(String, String)> {
        let mut out = vec![(owner.to_string(), arg.to_string())];
        let mut i = 0;
        while i < out.len() {
            let cur = out[i].clone();
            for act in &self.stack {
                for link in &act.ref_links {
                    for (a, b) in [(&link.inner, &link.outer), (&link.outer, &link.inner)] {
                        if *a == cur && !out.contains(b) {
                            out.push(b.clone());
                        }
                    }
                }
            }
            i += 1;
        }
        out
    }
}
