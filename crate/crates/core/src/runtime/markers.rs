use regex::Regex;
use serde_json::Value;

use crate::model::ArgPath;

/// Control markers extracted from an LLM agent reply.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Markers {
    /// Reply with every marker removed.
    pub text: String,
    pub sets: Vec<(ArgPath, Value)>,
    pub deactivate: bool,
    pub handoff: Option<String>,
}

fn marker_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"<<\s*(?:set\s+(?P<path>[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)?)\s*=\s*(?P<value>.*?)\s*|(?P<deact>deactivate)\s*|handoff\s+(?P<to>[A-Za-z_]\w*)\s*)>>",
        )
        .expect("static regex")
    })
}

/// Values are read as JSON when possible, otherwise as a plain string.
fn marker_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    let unquoted = raw
        .strip_prefix('\'')
        .and_then(|s| s.strip_suffix('\''))
        .unwrap_or(raw);
    Value::String(unquoted.to_string())
}

pub fn parse_markers(reply: &str) -> Markers {
    let mut m = Markers::default();
    for caps in marker_re().captures_iter(reply) {
        if let (Some(path), Some(value)) = (caps.name("path"), caps.name("value")) {
            if let Some(p) = ArgPath::parse(path.as_str()) {
                m.sets.push((p, marker_value(value.as_str())));
            }
        } else if caps.name("deact").is_some() {
            m.deactivate = true;
        } else if let Some(to) = caps.name("to") {
            m.handoff.get_or_insert_with(|| to.as_str().to_string());
        }
    }
    let stripped = marker_re().replace_all(reply, "");
    m.text = stripped
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn extracts_and_strips() {
        let m = parse_markers("I recommend Dune. <<set order.books=[\"Dune\"]>> <<set mood=happy>>\n<<deactivate>>");
        assert_eq!(m.text, "I recommend Dune.");
        assert_eq!(m.sets[0], (ArgPath::qualified("order", "books"), json!(["Dune"])));
        assert_eq!(m.sets[1], (ArgPath::bare("mood"), json!("happy")));
        assert!(m.deactivate);
        assert_eq!(m.handoff, None);
    }

    #[test]
    fn handoff_marker() {
        let m = parse_markers("Let me transfer you. <<handoff order>>");
        assert_eq!(m.handoff.as_deref(), Some("order"));
        assert_eq!(m.text, "Let me transfer you.");
    }

    #[test]
    fn plain_text_is_untouched() {
        let m = parse_markers("Hello << not a marker >>");
        assert_eq!(m.text, "Hello << not a marker >>");
        assert!(m.sets.is_empty());
    }
}
