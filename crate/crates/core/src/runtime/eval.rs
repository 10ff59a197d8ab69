//! Structured condition evaluation, template interpolation and answer parsing.

use regex::Regex;
use serde_json::Value;

use crate::model::{render_value, ArgPath, CompareOp, CompareRhs, ConditionExpr};
use crate::parser::compile_match_regex;

#[derive(Debug, Clone, PartialEq)]
enum Norm {
    None,
    Bool(bool),
    Num(f64),
    Str(String),
    List(Vec<Norm>),
    Other(String),
}

fn normalize(v: &Value) -> Norm {
    match v {
        Value::Null => Norm::None,
        Value::Bool(b) => Norm::Bool(*b),
        Value::Number(n) => Norm::Num(n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => {
            if s.eq_ignore_ascii_case("true") {
                Norm::Bool(true)
            } else if s.eq_ignore_ascii_case("false") {
                Norm::Bool(false)
            } else if let Ok(n) = s.trim().parse::<f64>() {
                Norm::Num(n)
            } else {
                Norm::Str(s.clone())
            }
        }
        Value::Array(items) => Norm::List(items.iter().map(normalize).collect()),
        Value::Object(_) => Norm::Other(v.to_string()),
    }
}

/// Equality after scalar normalization: numbers compare numerically,
/// `"True"`/`"False"` compare as booleans, everything else by string.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    normalize(a) == normalize(b)
}

/// Evaluates a condition with no natural-language atoms.
///
/// Returns `None` if the expression contains a natural-language atom or an
/// invalid regex.
pub fn eval_expression(expr: &ConditionExpr, lookup: &dyn Fn(&ArgPath) -> Value) -> Option<bool> {
    match expr {
        ConditionExpr::NaturalLanguage { .. } => None,
        ConditionExpr::Compare { path, op, rhs } => {
            let value = lookup(path);
            let equal = match rhs {
                CompareRhs::NoneMarker => value.is_null(),
                CompareRhs::Literal(lit) => values_equal(&value, lit),
            };
            Some(match op {
                CompareOp::Eq => equal,
                CompareOp::Neq => !equal,
            })
        }
        ConditionExpr::RegexMatch { pattern, path } => {
            let re = compile_match_regex(pattern).ok()?;
            let value = lookup(path);
            if value.is_null() {
                return Some(false);
            }
            Some(re.is_match(&render_value(&value)))
        }
        ConditionExpr::And(a, b) => Some(eval_expression(a, lookup)? && eval_expression(b, lookup)?),
        ConditionExpr::Or(a, b) => Some(eval_expression(a, lookup)? || eval_expression(b, lookup)?),
    }
}

fn placeholder() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([^}]*)\}").expect("static regex"))
}

/// Replaces `${path}` placeholders. Unparseable paths render empty and are
/// reported through `bad`.
pub fn interpolate(template: &str, lookup: &dyn Fn(&ArgPath) -> Value, bad: &mut dyn FnMut(&str)) -> String {
    placeholder()
        .replace_all(template, |caps: &regex::Captures| match ArgPath::parse(&caps[1]) {
            Some(path) => render_value(&lookup(&path)),
            None => {
                bad(&caps[1]);
                String::new()
            }
        })
        .into_owned()
}

/// Lenient yes/no parsing of a judge reply.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim()
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" | "y" => Some(true),
        "no" | "false" | "n" => Some(false),
        _ => None,
    }
}

/// Index (0-based) into `options` named by a classifier reply: a 1-based
/// number, `0` for none, or text that contains or is contained in an option.
pub fn parse_choice(reply: &str, options: &[&str]) -> Option<Option<usize>> {
    let trimmed = reply.trim().trim_end_matches('.');
    let digits: String = trimmed.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !digits.is_empty() {
        let n: usize = digits.parse().ok()?;
        return match n {
            0 => Some(None),
            n if n <= options.len() => Some(Some(n - 1)),
            _ => None,
        };
    }
    let lower = trimmed.to_lowercase();
    if lower.is_empty() {
        return None;
    }
    if lower == "none" || lower == "no" {
        return Some(None);
    }
    options
        .iter()
        .position(|o| {
            let o = o.to_lowercase();
            o == lower || o.contains(&lower) || lower.contains(&o)
        })
        .map(Some)
}

/// Agent named by a selector reply: exact (case-insensitive) match first,
/// then the earliest whole-word mention.
pub fn parse_agent_name(reply: &str, candidates: &[String]) -> Option<String> {
    let cleaned = reply
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace());
    if let Some(c) = candidates.iter().find(|c| c.eq_ignore_ascii_case(cleaned)) {
        return Some(c.clone());
    }
    let mut best: Option<(usize, &String)> = None;
    for c in candidates {
        let re = Regex::new(&format!(r"(?i)(^|[^A-Za-z0-9_]){}($|[^A-Za-z0-9_])", regex::escape(c))).ok()?;
        if let Some(m) = re.find(reply) {
            if best.is_none_or(|(pos, _)| m.start() < pos) {
                best = Some((m.start(), c));
            }
        }
    }
    best.map(|(_, c)| c.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_condition;
    use serde_json::json;

    fn eval(text: &str, x: Value) -> Option<bool> {
        let expr = parse_condition(text).unwrap();
        eval_expression(&expr, &|p: &ArgPath| if p.arg == "x" { x.clone() } else { Value::Null })
    }

    #[test]
    fn normalized_equality() {
        assert_eq!(eval("x == True", json!("true")), Some(true));
        assert_eq!(eval("x == True", json!(true)), Some(true));
        assert_eq!(eval("x == 3", json!(3.0)), Some(true));
        assert_eq!(eval("x == 'abc'", json!("abc")), Some(true));
        assert_eq!(eval("x != None", Value::Null), Some(false));
        assert_eq!(eval("x == None", Value::Null), Some(true));
        assert_eq!(eval("y == 1", json!(1)), Some(false));
    }

    #[test]
    fn regex_is_anchored_at_start() {
        assert_eq!(eval("re.match('ab+', x)", json!("abbb!")), Some(true));
        assert_eq!(eval("re.match('ab+', x)", json!("xab")), Some(false));
        assert_eq!(eval("re.match('ab+', x)", Value::Null), Some(false));
    }

    #[test]
    fn natural_language_is_not_structured() {
        assert_eq!(eval("the user wants to order", Value::Null), None);
    }

    #[test]
    fn interpolation() {
        let mut bad = Vec::new();
        let out = interpolate(
            "Books: ${books}. ${not a path}",
            &|p: &ArgPath| if p.arg == "books" { json!(["Dune", "Emma"]) } else { Value::Null },
            &mut |s| bad.push(s.to_string()),
        );
        assert_eq!(out, "Books: Dune, Emma. ");
        assert_eq!(bad, vec!["not a path"]);
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no(" no, it does not"), Some(false));
        assert_eq!(parse_yes_no("maybe"), None);
        let opts = ["the user wants a refund", "the user asks for any discount"];
        assert_eq!(parse_choice("2", &opts), Some(Some(1)));
        assert_eq!(parse_choice("0", &opts), Some(None));
        assert_eq!(parse_choice("the user asks for any discount", &opts), Some(Some(1)));
        assert_eq!(parse_choice("7", &opts), None);
        let cands = vec!["order".to_string(), "book_recommendation".to_string()];
        assert_eq!(parse_agent_name("order", &cands).as_deref(), Some("order"));
        assert_eq!(parse_agent_name("I pick `book_recommendation`.", &cands).as_deref(), Some("book_recommendation"));
        assert_eq!(parse_agent_name("none of these", &cands), None);
    }
}
