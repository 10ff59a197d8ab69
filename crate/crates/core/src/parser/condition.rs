//! Condition expressions.
//!
//! The structured subset is `path == value`, `path != value`, `== None`,
//! `re.match(pattern, path)` joined by `and`/`or` (`and` binds tighter, no
//! parentheses). Anything else is a natural-language condition.

use regex::Regex;

use crate::model::{ArgPath, CompareOp, CompareRhs, ConditionExpr, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConditionError {
    #[error("empty condition")]
    Empty,
    #[error("invalid regular expression `{pattern}`: {reason}")]
    BadRegex { pattern: String, reason: String },
}

impl ConditionError {
    pub fn code(&self) -> &'static str {
        match self {
            ConditionError::Empty => "E_EMPTY_CONDITION",
            ConditionError::BadRegex { .. } => "E_BAD_REGEX",
        }
    }
}

pub fn parse_condition(text: &str) -> Result<ConditionExpr, ConditionError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(ConditionError::Empty);
    }
    match parse_or(text)? {
        Some(expr) => Ok(expr),
        None => Ok(ConditionExpr::NaturalLanguage {
            text: text.to_string(),
        }),
    }
}

/// Compiles a `re.match` pattern anchored at the start of the subject.
pub fn compile_match_regex(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(&format!("^(?:{pattern})"))
}

fn parse_or(text: &str) -> Result<Option<ConditionExpr>, ConditionError> {
    let parts = split_top_level(text, " or ");
    let mut exprs = Vec::with_capacity(parts.len());
    for part in parts {
        match parse_and(part)? {
            Some(e) => exprs.push(e),
            None => return Ok(None),
        }
    }
    Ok(fold(exprs, ConditionExpr::Or))
}

fn parse_and(text: &str) -> Result<Option<ConditionExpr>, ConditionError> {
    let parts = split_top_level(text, " and ");
    let mut exprs = Vec::with_capacity(parts.len());
    for part in parts {
        match parse_atom(part.trim())? {
            Some(e) => exprs.push(e),
            None => return Ok(None),
        }
    }
    Ok(fold(exprs, ConditionExpr::And))
}

fn fold(
    exprs: Vec<ConditionExpr>,
    join: fn(Box<ConditionExpr>, Box<ConditionExpr>) -> ConditionExpr,
) -> Option<ConditionExpr> {
    exprs
        .into_iter()
        .reduce(|acc, e| join(Box::new(acc), Box::new(e)))
}

fn parse_atom(text: &str) -> Result<Option<ConditionExpr>, ConditionError> {
    if let Some(inner) = text
        .strip_prefix("re.match(")
        .and_then(|rest| rest.strip_suffix(')'))
    {
        let Some(comma) = last_top_level(inner, ',') else {
            return Ok(None);
        };
        let (pat, path) = (inner[..comma].trim(), inner[comma + 1..].trim());
        let pat = pat.strip_prefix('r').unwrap_or(pat);
        let (Some(pattern), Some(path)) = (unquote(pat), ArgPath::parse(path)) else {
            return Ok(None);
        };
        if let Err(e) = compile_match_regex(&pattern) {
            return Err(ConditionError::BadRegex {
                pattern,
                reason: e.to_string(),
            });
        }
        return Ok(Some(ConditionExpr::RegexMatch { pattern, path }));
    }

    let (op, at) = match (find_top_level(text, "=="), find_top_level(text, "!=")) {
        (Some(i), _) => (CompareOp::Eq, i),
        (None, Some(i)) => (CompareOp::Neq, i),
        (None, None) => return Ok(None),
    };
    let Some(path) = ArgPath::parse(&text[..at]) else {
        return Ok(None);
    };
    let rhs_text = text[at + 2..].trim();
    let rhs = if let Some(s) = unquote(rhs_text) {
        CompareRhs::Literal(Value::String(s))
    } else if rhs_text.is_empty() || rhs_text.chars().any(char::is_whitespace) {
        return Ok(None);
    } else if rhs_text == "None" || rhs_text == "null" {
        CompareRhs::NoneMarker
    } else {
        CompareRhs::Literal(match crate::yaml::plain_scalar(rhs_text) {
            Value::Null => return Ok(None),
            v => v,
        })
    };
    Ok(Some(ConditionExpr::Compare { path, op, rhs }))
}

fn unquote(s: &str) -> Option<String> {
    let s = s.trim();
    if s.len() >= 2 {
        let (first, last) = (s.as_bytes()[0], s.as_bytes()[s.len() - 1]);
        if (first == b'"' || first == b'\'') && first == last {
            return Some(s[1..s.len() - 1].to_string());
        }
    }
    None
}

/// Byte offsets of characters that sit outside quotes and parentheses.
fn top_level_mask(text: &str) -> Vec<bool> {
    let mut mask = vec![false; text.len()];
    let mut quote: Option<char> = None;
    let mut depth = 0usize;
    for (i, c) in text.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '"' | '\'' => quote = Some(c),
                '(' => depth += 1,
                ')' => depth = depth.saturating_sub(1),
                _ => {
                    if depth == 0 {
                        mask[i] = true;
                    }
                }
            },
        }
    }
    mask
}

fn split_top_level<'a>(text: &'a str, sep: &str) -> Vec<&'a str> {
    let mask = top_level_mask(text);
    let mut parts = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + sep.len() <= text.len() {
        if text.is_char_boundary(i)
            && text[i..].starts_with(sep)
            && mask[i..i + sep.len()].iter().all(|&m| m)
        {
            parts.push(&text[start..i]);
            i += sep.len();
            start = i;
        } else {
            i += 1;
        }
    }
    parts.push(&text[start..]);
    parts
}

fn find_top_level(text: &str, pat: &str) -> Option<usize> {
    let mask = top_level_mask(text);
    text.match_indices(pat)
        .map(|(i, _)| i)
        .find(|&i| mask[i..i + pat.len()].iter().all(|&m| m))
}

fn last_top_level(text: &str, c: char) -> Option<usize> {
    let mut quote: Option<char> = None;
    let mut found = None;
    for (i, ch) in text.char_indices() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => {}
            None if ch == '"' || ch == '\'' => quote = Some(ch),
            None if ch == c => found = Some(i),
            None => {}
        }
    }
    found
}
