//! Tolerant reader for the conjecture parser's JSON reply.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object found: {0}")]
    Malformed(String),
    #[error("JSON does not match the expected schema: {0}")]
    Schema(String),
}

/// Parallel arrays of conjectures and negations plus the proof that
/// assumes them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedConjectures {
    pub conjectures: Vec<String>,
    pub negations: Vec<String>,
    pub proof: String,
}

impl ParsedConjectures {
    pub fn is_empty(&self) -> bool {
        self.conjectures.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain strings serialize")
    }
}

static HEADER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:\*\*|__)?\s*(?:negation\s+of\s+conjecture|negation|conjecture|lemma|claim)\s*(?:\d+|[ivx]+)?\s*(?:\*\*|__)?\s*[:.)\-]\s*(?:\*\*|__)?\s*",
    )
    .unwrap()
});

/// Removes a leading label such as `Conjecture 1:` or `**Negation 2.**`.
pub fn strip_header(text: &str) -> String {
    HEADER_PREFIX.replace(text.trim(), "").trim().to_string()
}

/// Every balanced `{...}` span, skipping braces inside JSON strings.
fn object_spans(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in text.match_indices('{').map(|(i, _)| i) {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push(&text[start..=start + offset]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

fn string_array(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ParseError> {
    let value = obj
        .get(key)
        .ok_or_else(|| ParseError::Schema(format!("missing \"{key}\"")))?;
    let items = value
        .as_array()
        .ok_or_else(|| ParseError::Schema(format!("\"{key}\" is not an array")))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = v
                .as_str()
                .ok_or_else(|| ParseError::Schema(format!("\"{key}\"[{i}] is not a string")))?;
            let s = strip_header(s);
            if s.is_empty() {
                return Err(ParseError::Schema(format!("\"{key}\"[{i}] is empty")));
            }
            Ok(s)
        })
        .collect()
}

/// Finds the first JSON object mentioning `"conjectures"` anywhere in
/// `raw` (code fences and surrounding prose are ignored) and validates it:
/// both arrays present, equal length, no empty entries. Empty arrays are
/// a valid "nothing found" answer.
pub fn parse_conjectures(raw: &str) -> Result<ParsedConjectures, ParseError> {
    let mut saw_object = false;
    let mut found = None;
    for span in object_spans(raw) {
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(span) {
            saw_object = true;
            if obj.contains_key("conjectures") {
                found = Some(obj);
                break;
            }
        }
    }
    let obj = match found {
        Some(obj) => obj,
        None if saw_object => return Err(ParseError::Schema("no object has a \"conjectures\" key".into())),
        None => return Err(ParseError::Malformed("no parseable JSON object in the reply".into())),
    };
    let conjectures = string_array(&obj, "conjectures")?;
    let negations = string_array(&obj, "negations")?;
    if conjectures.len() != negations.len() {
        return Err(ParseError::Schema(format!(
            "{} conjectures but {} negations",
            conjectures.len(),
            negations.len()
        )));
    }
    let proof = match obj.get("proof") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_string(),
        Some(_) => return Err(ParseError::Schema("\"proof\" is not a string".into())),
    };
    if !conjectures.is_empty() && proof.is_empty() {
        return Err(ParseError::Schema("conjectures given without a proof".into()));
    }
    Ok(ParsedConjectures {
        conjectures,
        negations,
        proof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn well_formed() {
        let raw = r#"{"conjectures": ["A holds", "B holds"], "negations": ["A fails", "B fails"], "proof": "By A and B."}"#;
        let p = parse_conjectures(raw).unwrap();
        assert_eq!(p.conjectures, ["A holds", "B holds"]);
        assert_eq!(p.negations, ["A fails", "B fails"]);
        assert_eq!(p.proof, "By A and B.");
    }

    #[test]
    fn fenced_with_prose() {
        let raw = "Here is the JSON you asked for:\n```json\n{\n  \"conjectures\": [\"Conjecture 1: x > 0 {strictly}\"],\n  \"negations\": [\"Negation of Conjecture 1: x <= 0\"],\n  \"proof\": \"Since x > 0 ...\"\n}\n```\nLet me know if you need more.";
        let p = parse_conjectures(raw).unwrap();
        assert_eq!(p.conjectures, ["x > 0 {strictly}"]);
        assert_eq!(p.negations, ["x <= 0"]);
    }

    #[test]
    fn empty_arrays_are_valid() {
        let p = parse_conjectures(r#"{"conjectures": [], "negations": [], "proof": "..."}"#).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn rejections() {
        let mismatch = r#"{"conjectures": ["a", "b", "c"], "negations": ["x", "y"], "proof": "p"}"#;
        assert!(matches!(parse_conjectures(mismatch), Err(ParseError::Schema(_))));
        assert!(matches!(parse_conjectures("no json here"), Err(ParseError::Malformed(_))));
        assert!(matches!(parse_conjectures("{\"conjectures\": [\"a\""), Err(ParseError::Malformed(_))));
        assert!(matches!(parse_conjectures(r#"{"other": 1}"#), Err(ParseError::Schema(_))));
        let blank = r#"{"conjectures": ["  "], "negations": ["x"], "proof": "p"}"#;
        assert!(matches!(parse_conjectures(blank), Err(ParseError::Schema(_))));
    }

    #[test]
    fn header_stripping() {
        assert_eq!(strip_header("Conjecture 1: f is injective"), "f is injective");
        assert_eq!(strip_header("**Negation 2.** f is not injective"), "f is not injective");
        assert_eq!(strip_header("Negation of Conjecture 3: no"), "no");
        assert_eq!(strip_header("Conjectures about f are hard"), "Conjectures about f are hard");
    }

    proptest! {
        #[test]
        fn canonical_form_round_trips(
            pairs in prop::collection::vec(("[a-z][a-z0-9 {}\"\\\\]{0,20}[a-z]", "[a-z][a-z0-9 ]{0,20}[a-z]"), 0..4),
            proof in "[a-z]([a-z ]{0,30}[a-z])?",
        ) {
            let x = ParsedConjectures {
                conjectures: pairs.iter().map(|p| p.0.clone()).collect(),
                negations: pairs.iter().map(|p| p.1.clone()).collect(),
                proof,
            };
            prop_assert_eq!(parse_conjectures(&x.to_json()).unwrap(), x);
        }
    }
}
