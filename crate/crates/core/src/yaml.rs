//! A small YAML document tree that keeps source positions and scalar styles.
//!
//! ADL distinguishes `"quoted"` literals from bare argument paths, so the
//! scalar style has to survive loading. Config files (scripted rules,
//! dialogue scripts) go through [`from_str`] which converts to JSON values
//! and deserializes with serde.

use std::collections::HashMap;

use serde::de::DeserializeOwned;
use yaml_rust2::parser::{Event, MarkedEventReceiver, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarStyle {
    Plain,
    Quoted,
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Scalar { value: String, style: ScalarStyle },
    Seq(Vec<Node>),
    Map(Vec<(Node, Node)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// 1-based line.
    pub line: usize,
    /// 1-based column.
    pub column: usize,
}

impl Node {
    pub fn as_str(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Scalar { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn as_seq(&self) -> Option<&[Node]> {
        match &self.kind {
            NodeKind::Seq(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&[(Node, Node)]> {
        match &self.kind {
            NodeKind::Map(entries) => Some(entries),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(&self.kind, NodeKind::Scalar { value, style: ScalarStyle::Plain } if value.is_empty() || value == "~" || value == "null")
    }

    /// Looks up a key in a mapping node (last occurrence wins).
    pub fn get(&self, key: &str) -> Option<&Node> {
        self.as_map()?
            .iter()
            .rev()
            .find(|(k, _)| k.as_str() == Some(key))
            .map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YamlError {
    pub message: String,
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for YamlError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at line {} column {}", self.message, self.line, self.column)
    }
}

impl std::error::Error for YamlError {}

enum Frame {
    Seq(Vec<Node>, Marker, usize),
    Map(Vec<(Node, Node)>, Option<Node>, Marker, usize),
}

#[derive(Default)]
struct Builder {
    stack: Vec<Frame>,
    root: Option<Node>,
    anchors: HashMap<usize, Node>,
    docs: usize,
}

fn node_at(kind: NodeKind, mark: Marker) -> Node {
    Node {
        kind,
        line: mark.line(),
        column: mark.col() + 1,
    }
}

impl Builder {
    fn push_value(&mut self, node: Node, anchor: usize) {
        if anchor > 0 {
            self.anchors.insert(anchor, node.clone());
        }
        match self.stack.last_mut() {
            None => {
                if self.root.is_none() {
                    self.root = Some(node);
                }
            }
            Some(Frame::Seq(items, ..)) => items.push(node),
            Some(Frame::Map(entries, pending_key, ..)) => match pending_key.take() {
                None => *pending_key = Some(node),
                Some(key) => entries.push((key, node)),
            },
        }
    }
}

impl MarkedEventReceiver for Builder {
    fn on_event(&mut self, ev: Event, mark: Marker) {
        match ev {
            Event::DocumentStart => self.docs += 1,
            Event::Scalar(value, style, anchor, _) => {
                let style = match style {
                    TScalarStyle::Plain => ScalarStyle::Plain,
                    TScalarStyle::SingleQuoted | TScalarStyle::DoubleQuoted => ScalarStyle::Quoted,
                    _ => ScalarStyle::Block,
                };
                self.push_value(node_at(NodeKind::Scalar { value, style }, mark), anchor);
            }
            Event::SequenceStart(anchor, _) => self.stack.push(Frame::Seq(Vec::new(), mark, anchor)),
            Event::MappingStart(anchor, _) => {
                self.stack.push(Frame::Map(Vec::new(), None, mark, anchor))
            }
            Event::SequenceEnd => {
                if let Some(Frame::Seq(items, m, anchor)) = self.stack.pop() {
                    self.push_value(node_at(NodeKind::Seq(items), m), anchor);
                }
            }
            Event::MappingEnd => {
                if let Some(Frame::Map(entries, _, m, anchor)) = self.stack.pop() {
                    // Block mappings are marked at the first `:`; report the first key instead.
                    let (line, column) = entries
                        .first()
                        .map_or((m.line(), m.col() + 1), |(k, _)| (k.line, k.column));
                    let node = Node {
                        kind: NodeKind::Map(entries),
                        line,
                        column,
                    };
                    self.push_value(node, anchor);
                }
            }
            Event::Alias(id) => {
                let node = self.anchors.get(&id).cloned().unwrap_or(Node {
                    kind: NodeKind::Scalar {
                        value: String::new(),
                        style: ScalarStyle::Plain,
                    },
                    line: mark.line(),
                    column: mark.col() + 1,
                });
                self.push_value(node, 0);
            }
            _ => {}
        }
    }
}

/// Loads the first document. `Ok(None)` for an empty stream.
pub fn load(source: &str) -> Result<Option<Node>, YamlError> {
    let mut builder = Builder::default();
    let mut parser = Parser::new_from_str(source);
    parser.load(&mut builder, false).map_err(|e| YamlError {
        message: e.info().to_string(),
        line: e.marker().line(),
        column: e.marker().col() + 1,
    })?;
    Ok(builder.root)
}

/// Converts a node to JSON, interpreting plain scalars with YAML 1.2 core rules.
pub fn to_json(node: &Node) -> serde_json::Value {
    use serde_json::Value;
    match &node.kind {
        NodeKind::Scalar { value, style } => match style {
            ScalarStyle::Plain => plain_scalar(value),
            _ => Value::String(value.clone()),
        },
        NodeKind::Seq(items) => Value::Array(items.iter().map(to_json).collect()),
        NodeKind::Map(entries) => Value::Object(
            entries
                .iter()
                .map(|(k, v)| (k.as_str().unwrap_or_default().to_string(), to_json(v)))
                .collect(),
        ),
    }
}

pub(crate) fn plain_scalar(value: &str) -> serde_json::Value {
    use serde_json::Value;
    match value {
        "" | "~" | "null" | "Null" | "NULL" => Value::Null,
        "true" | "True" | "TRUE" => Value::Bool(true),
        "false" | "False" | "FALSE" => Value::Bool(false),
        _ => {
            if let Ok(i) = value.parse::<i64>() {
                Value::from(i)
            } else if let Some(f) = value
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite() && value.chars().any(|c| c.is_ascii_digit()))
            {
                Value::from(f)
            } else {
                Value::String(value.to_string())
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("yaml: {0}")]
    Yaml(#[from] YamlError),
    #[error("invalid document: {0}")]
    Shape(#[from] serde_json::Error),
}

/// Deserializes a YAML config document through serde.
pub fn from_str<T: DeserializeOwned>(source: &str) -> Result<T, ConfigError> {
    let value = load(source)?
        .map(|n| to_json(&n))
        .unwrap_or(serde_json::Value::Null);
    Ok(serde_json::from_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_positions_and_styles() {
        let src = "main:\n  steps:\n    - set:\n        a: \"Mary Brown\"\n        b: other.x\n";
        let root = load(src).unwrap().unwrap();
        let main = root.get("main").unwrap();
        assert_eq!(main.line, 2);
        let set = &main.get("steps").unwrap().as_seq().unwrap()[0];
        assert_eq!((set.line, set.column), (3, 7));
        let assigns = set.get("set").unwrap();
        match &assigns.get("a").unwrap().kind {
            NodeKind::Scalar { style, value } => {
                assert_eq!(*style, ScalarStyle::Quoted);
                assert_eq!(value, "Mary Brown");
            }
            _ => panic!(),
        }
        match &assigns.get("b").unwrap().kind {
            NodeKind::Scalar { style, .. } => assert_eq!(*style, ScalarStyle::Plain),
            _ => panic!(),
        }
    }

    #[test]
    fn empty_stream_has_no_root() {
        assert!(load("").unwrap().is_none());
        assert!(load("# just a comment\n").unwrap().is_none());
    }

    #[test]
    fn malformed_document_errors() {
        let err = load("a: [1, 2\nb: c").unwrap_err();
        assert!(err.line >= 1);
    }

    #[test]
    fn json_conversion() {
        #[derive(serde::Deserialize)]
        struct Cfg {
            n: u32,
            names: Vec<String>,
            flag: bool,
        }
        let cfg: Cfg = from_str("n: 5\nnames: [a, \"b\"]\nflag: True\n").unwrap();
        assert_eq!(cfg.n, 5);
        assert_eq!(cfg.names, vec!["a", "b"]);
        assert!(cfg.flag);
    }
}
