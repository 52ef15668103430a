//! Turning grader and processor transcripts into structured values.

use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::types::{GradeReport, Issue, Score, Severity};

/// Exact reply the answer processor gives for a clean proof.
pub const NO_ISSUES: &str = "NO_ISSUES";

static FINAL_GRADE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)final\s+grade").unwrap());
static OUT_OF_SEVEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\d+)\s*/\s*7\b").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());
static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(#{1,6}\s*)?(\*\*|__)?\s*([A-Za-z][A-Za-z'’ ]{1,60}?)\s*(?:\*\*|__)?\s*:\s*(?:\*\*|__)?\s*(.*)$")
        .unwrap()
});
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•+]|\d{1,2}[.)])\s+(.*)$").unwrap());

const KNOWN_HEADERS: &[&str] = &[
    "areas for improvement",
    "scaffolding questions",
    "final grade",
    "strengths",
    "overall strategy",
    "coroner's report",
    "chief grader's official assessment",
    "justification",
];

const NOT_HEADERS: &[&str] = &["slip", "fallacy", "minor", "major", "note"];

const EMPTY_ITEMS: &[&str] = &["none", "n/a", "na", "no issues", "none found", "no issues found", "nothing"];

#[derive(Debug, PartialEq, Eq)]
struct Section {
    name: String,
    lines: Vec<String>,
}

fn header(line: &str) -> Option<(String, String)> {
    if BULLET.is_match(line) {
        return None;
    }
    let caps = HEADER.captures(line)?;
    let name = caps[3].trim().to_lowercase().replace('’', "'");
    if NOT_HEADERS.contains(&name.as_str()) {
        return None;
    }
    let marked = caps.get(1).is_some() || caps.get(2).is_some();
    if KNOWN_HEADERS.contains(&name.as_str()) || marked {
        Some((name, caps[4].trim_end_matches('*').trim().to_string()))
    } else {
        None
    }
}

fn sections(text: &str) -> Vec<Section> {
    let mut out = vec![Section {
        name: String::new(),
        lines: Vec::new(),
    }];
    for line in text.lines() {
        if let Some((name, rest)) = header(line) {
            out.push(Section {
                name,
                lines: if rest.is_empty() { vec![] } else { vec![rest] },
            });
        } else if let Some(last) = out.last_mut() {
            last.lines.push(line.to_string());
        }
    }
    out
}

/// Bulleted or numbered items; unbulleted lines continue the previous item.
pub fn list_items(lines: &[String]) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    let mut open = false;
    for line in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            open = false;
            continue;
        }
        if let Some(caps) = BULLET.captures(line) {
            items.push(caps[1].trim().to_string());
            open = true;
        } else if open {
            let last = items.last_mut().expect("open item");
            last.push(' ');
            last.push_str(trimmed);
        } else {
            items.push(trimmed.to_string());
            open = true;
        }
    }
    items
        .into_iter()
        .filter(|item| {
            let bare: String = item
                .chars()
                .filter(|c| !matches!(c, '*' | '_' | '.' | '(' | ')' | '`'))
                .collect::<String>()
                .trim()
                .to_lowercase();
            !bare.is_empty() && !EMPTY_ITEMS.contains(&bare.as_str())
        })
        .collect()
}

/// The earliest severity tag in the text wins; untagged issues are fallacies.
pub fn classify_issue(text: &str) -> Severity {
    let lower = text.to_lowercase();
    match (lower.find("slip"), lower.find("fallacy")) {
        (Some(s), Some(f)) if s < f => Severity::Slip,
        (Some(_), None) => Severity::Slip,
        _ => Severity::Fallacy,
    }
}

fn raw_score(transcript: &str) -> Result<u8> {
    let anchor = FINAL_GRADE
        .find_iter(transcript)
        .last()
        .ok_or_else(|| Error::GradeParse("no \"Final Grade\" line".into()))?;
    let tail = &transcript[anchor.end()..];
    let tail = &tail[..tail.len().min(400)];
    let digits = OUT_OF_SEVEN
        .captures(tail)
        .map(|c| c.get(1).unwrap().as_str())
        .or_else(|| INTEGER.find(tail).map(|m| m.as_str()))
        .ok_or_else(|| Error::GradeParse("no score after \"Final Grade\"".into()))?;
    let value: u32 = digits
        .parse()
        .map_err(|_| Error::GradeParse(format!("unreadable score {digits:?}")))?;
    if value > 7 {
        return Err(Error::GradeParse(format!("score {value} is outside 0..=7")));
    }
    Ok(value as u8)
}

/// Parses a grader transcript into a report that satisfies the
/// [`GradeReport`] invariants, recording every adjustment made.
///
/// The score is the first number after the last "Final Grade" anchor. A 5
/// becomes 4, any fallacy caps the score at 3, and a 7 that still lists
/// slips becomes 6.
pub fn parse_grade(transcript: &str) -> Result<GradeReport> {
    let mut score = raw_score(transcript)?;
    let secs = sections(transcript);
    let collect = |prefix: &str| -> Vec<String> {
        secs.iter()
            .filter(|s| s.name.starts_with(prefix))
            .flat_map(|s| list_items(&s.lines))
            .collect()
    };
    let issues: Vec<Issue> = collect("areas for improvement")
        .into_iter()
        .map(|text| Issue {
            severity: classify_issue(&text),
            text,
        })
        .collect();
    let scaffolding = collect("scaffolding question");

    let mut coercions = Vec::new();
    if score == 5 {
        score = 4;
        coercions.push("score 5 is disallowed; coerced to 4".to_string());
    }
    if score > 3 && issues.iter().any(|i| i.severity == Severity::Fallacy) {
        coercions.push(format!("fallacy listed; score {score} capped at 3"));
        score = 3;
    }
    if score == 7 && !issues.is_empty() {
        score = 6;
        coercions.push("7 with listed slips; coerced to 6".to_string());
    }
    Ok(GradeReport::new(Score::new(score)?, issues, scaffolding, transcript)?.with_coercions(coercions))
}

/// Issues listed by the answer processor. Only an exact `NO_ISSUES`
/// (after trimming whitespace) counts as clean; anything unrecognised is
/// one opaque issue.
pub fn parse_processor(response: &str) -> Vec<String> {
    let trimmed = response.trim();
    if trimmed == NO_ISSUES {
        return Vec::new();
    }
    if trimmed.is_empty() {
        return vec!["(empty processor response)".to_string()];
    }
    let bullets: Vec<String> = trimmed
        .lines()
        .filter_map(|l| BULLET.captures(l).map(|c| c[1].trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect();
    if bullets.is_empty() {
        vec![trimmed.to_string()]
    } else {
        bullets
    }
}
