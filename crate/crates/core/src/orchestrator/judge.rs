//! Picking between the finals of independent runs.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Result;
use crate::gateway::ModelRole;
use crate::prompts::TemplateId;
use crate::session::{Lane, Session};
use crate::trace::EventKind;
use crate::types::{best, CandidateSolution, Problem, RunState};

static DECISION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<decision>\s*([ab])\s*</decision>").unwrap());
static JUSTIFICATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)\**justification:?\**:?\s*(.*?)(?:<decision>|$)").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeDecision {
    pub winner: Winner,
    pub justification: String,
    pub transcript: String,
    /// True when no usable tag was produced and the ranking decided.
    pub fallback: bool,
}

/// The last `<decision>A</decision>` or `<decision>B</decision>` tag.
pub fn parse_decision(transcript: &str) -> Option<Winner> {
    let caps = DECISION.captures_iter(transcript).last()?;
    match caps[1].to_ascii_uppercase().as_str() {
        "A" => Some(Winner::A),
        _ => Some(Winner::B),
    }
}

fn justification(transcript: &str) -> String {
    JUSTIFICATION
        .captures_iter(transcript)
        .last()
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default()
}

fn render_history(label: &str, run: &RunState, cap: usize) -> String {
    let mut out = format!("## Sequence of solutions from run {label}\n");
    let skip = run.history.len().saturating_sub(cap.max(1));
    for (i, s) in run.history.iter().enumerate().skip(skip) {
        let grade = s.score().map(|g| format!(" (graded {g})")).unwrap_or_default();
        let _ = write!(out, "\n### Step {}{grade}\n{}\n", i + 1, s.proof_text.trim());
    }
    out
}

/// Compares the finals of two runs with the combiner prompt.
///
/// A reply without a decision tag is re-prompted once; if that also fails,
/// or the calls cannot be made, the better-ranked final wins.
pub fn judge(
    session: &Session<'_>,
    problem: &Problem,
    a: (&RunState, &CandidateSolution),
    b: (&RunState, &CandidateSolution),
    lane: &Lane,
) -> Result<JudgeDecision> {
    let cap = session.config.memory_prompt_cap;
    let materials = [
        problem.additional_materials.clone().unwrap_or_default(),
        render_history("A", a.0, cap),
        render_history("B", b.0, cap),
    ]
    .iter()
    .map(|s| s.trim())
    .filter(|s| !s.is_empty())
    .collect::<Vec<_>>()
    .join("\n\n");
    let prompt = session.registry.render(
        TemplateId::AnswerCombiner,
        &[
            ("problem", &problem.statement),
            ("solution_a", &a.1.proof_text),
            ("solution_b", &b.1.proof_text),
            ("additional_materials", &materials),
        ],
    )?;

    let attempt = |prompt: String, lane: &Lane| -> Result<(Option<Winner>, String)> {
        let response = session.send(ModelRole::Judge, TemplateId::AnswerCombiner, prompt, lane, None)?;
        Ok((parse_decision(&response.text), response.text))
    };

    let mut transcript = String::new();
    let mut decided = None;
    match attempt(prompt.clone(), lane) {
        Ok((Some(w), text)) => {
            decided = Some(w);
            transcript = text;
        }
        Ok((None, text)) => {
            transcript = text;
            let retry = format!(
                "{prompt}\n\nYour previous reply did not end with a decision tag. Reply again and end with exactly one of <decision>A</decision> or <decision>B</decision>."
            );
            if let Ok((w, text)) = attempt(retry, &lane.child("retry")) {
                decided = w;
                transcript = text;
            }
        }
        Err(err) if err.is_budget_exhausted() => {}
        Err(err) => return Err(err),
    }

    let decision = match decided {
        Some(winner) => JudgeDecision {
            winner,
            justification: justification(&transcript),
            transcript,
            fallback: false,
        },
        None => {
            let pick = best([a.1, b.1])?;
            JudgeDecision {
                winner: if pick.id == a.1.id { Winner::A } else { Winner::B },
                justification: "no decision tag; chose the better-ranked final".to_string(),
                transcript,
                fallback: true,
            }
        }
    };
    session.event(
        lane,
        EventKind::Judge,
        json!({
            "a": a.1.id,
            "b": b.1.id,
            "winner": decision.winner,
            "fallback": decision.fallback,
        }),
    );
    Ok(decision)
}
