//! Conjecture extraction and bisection.
//!
//! A stalled proof usually leans on a few unproven claims. The extractor
//! names them, together with a self-contained negation of each; the
//! parser turns that into JSON. Each (conjecture, negation) pair is then
//! attacked from both sides as two brand-new problems with no materials.
//! If exactly one side reaches the threshold it becomes a lemma; otherwise
//! the pair is recorded as a failure and shown to the next extraction.

pub mod parse;

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dialectic::{join_materials, solve_branches, BranchSpec, SolveContext};
use crate::error::{Error, Result};
use crate::gateway::{BudgetScope, ModelRole};
use crate::prompts::TemplateId;
use crate::session::{fan_out, Lane, Session};
use crate::trace::EventKind;
use crate::types::{
    CandidateSolution, FailedPair, FailureReason, HypothesisPair, Lemma, Origin, Polarity, Problem,
};

pub use parse::{parse_conjectures, ParseError, ParsedConjectures};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub pairs: Vec<HypothesisPair>,
    /// The seed proof rewritten to assume the conjectures.
    pub rewritten_proof: String,
    /// Pairs dropped by the extraction budget.
    pub truncated: usize,
    pub lint_warnings: Vec<String>,
}

static REFERENTIAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(as above|as before|from above|defined above|the above|aforementioned|previous(ly)?|from the proof|in the proof|from step|in step|the set \w+ from|the original problem)\b",
    )
    .unwrap()
});

/// Phrases suggesting a statement depends on text it does not contain.
/// Advisory only.
pub fn lint_self_contained(statement: &str) -> Vec<String> {
    REFERENTIAL
        .find_iter(statement)
        .map(|m| format!("refers outside itself: {:?}", m.as_str()))
        .collect()
}

fn render_seeds(seeds: &[CandidateSolution]) -> String {
    let mut out = String::new();
    for (i, seed) in seeds.iter().enumerate() {
        let grade = seed.score().map(|s| format!(" (graded {s})")).unwrap_or_default();
        let _ = write!(out, "### Candidate proof {}{grade}\n{}\n\n", i + 1, seed.proof_text.trim());
    }
    out.trim_end().to_string()
}

/// Renders failure context the way the extractor sees it.
pub fn render_failures(failures: &[FailedPair]) -> String {
    if failures.is_empty() {
        return String::new();
    }
    let mut out = String::from("## Conjectures that could not be settled\n");
    for f in failures {
        let _ = writeln!(
            out,
            "- [{}] Conjecture: {} | Negation: {}",
            f.reason,
            f.pair.conjecture.trim(),
            f.pair.negation.trim()
        );
    }
    out
}

/// Asks the extractor for load-bearing conjectures in `seeds`, parses the
/// answer (one re-prompt allowed) and keeps at most `extraction_budget`
/// pairs.
#[allow(clippy::too_many_arguments)]
pub fn extract_hypotheses(
    session: &Session<'_>,
    problem: &Problem,
    seeds: &[CandidateSolution],
    lemmas: &[Lemma],
    failures: &[FailedPair],
    extra_materials: &str,
    lane: &Lane,
) -> Result<ExtractionResult> {
    if seeds.is_empty() {
        return Err(Error::Extraction("no seed solutions".into()));
    }
    let lemma_text = SolveContext::empty().with_lemmas(lemmas).render_lemmas();
    let materials = join_materials([
        problem.additional_materials.as_deref().unwrap_or(""),
        &lemma_text,
        &render_failures(failures),
        extra_materials,
    ]);
    let seed_text = render_seeds(seeds);
    let extracted = session.call(
        ModelRole::Extractor,
        TemplateId::ConjectureExtractor,
        &[
            ("problem", &problem.statement),
            ("solution", &seed_text),
            ("additional_materials", &materials),
        ],
        &lane.child("extract"),
        None,
    )?;

    let parser_prompt = session
        .registry
        .render(TemplateId::ConjectureParser, &[("solution", &extracted.text)])?;
    let first = session.send(
        ModelRole::Parser,
        TemplateId::ConjectureParser,
        parser_prompt.clone(),
        &lane.child("parse"),
        None,
    )?;
    let parsed = match parse_conjectures(&first.text) {
        Ok(p) => p,
        Err(err) => {
            session.event(lane, EventKind::ExtractionFailed, json!({ "attempt": 1, "error": err.to_string() }));
            let retry_prompt = format!(
                "{parser_prompt}\n\nYour previous reply could not be used ({err}). Reply with the JSON object only."
            );
            let second = session.send(
                ModelRole::Parser,
                TemplateId::ConjectureParser,
                retry_prompt,
                &lane.child("parse.retry"),
                None,
            )?;
            parse_conjectures(&second.text).map_err(|err| {
                session.event(lane, EventKind::ExtractionFailed, json!({ "attempt": 2, "error": err.to_string() }));
                Error::Extraction(err.to_string())
            })?
        }
    };

    let budget = session.config.extraction_budget as usize;
    let total = parsed.conjectures.len();
    let source_ids: Vec<String> = seeds.iter().map(|s| s.id.clone()).collect();
    let mut pairs = Vec::new();
    let mut lint_warnings = Vec::new();
    for (i, (c, n)) in parsed.conjectures.into_iter().zip(parsed.negations).take(budget).enumerate() {
        let pair = HypothesisPair::new(format!("{}-h{i}", lane.id()), c, n, source_ids.clone())?;
        for (side, text) in [("conjecture", &pair.conjecture), ("negation", &pair.negation)] {
            for warning in lint_self_contained(text) {
                session.event(lane, EventKind::Lint, json!({ "pair": pair.id, "side": side, "warning": warning }));
                lint_warnings.push(format!("{} {side}: {warning}", pair.id));
            }
        }
        pairs.push(pair);
    }
    let truncated = total.saturating_sub(budget);
    if truncated > 0 {
        session.event(lane, EventKind::Truncated, json!({ "found": total, "kept": budget }));
    }
    session.event(
        lane,
        EventKind::Extraction,
        json!({ "pairs": pairs, "truncated": truncated }),
    );
    Ok(ExtractionResult {
        pairs,
        rewritten_proof: parsed.proof,
        truncated,
        lint_warnings,
    })
}

/// Outcome of grading both sides of a pair against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    Negative,
    Ambiguous,
}

/// Exactly one side at or above `tau` settles the pair.
pub fn classify(g_pos: u8, g_neg: u8, tau: u8) -> Verdict {
    match (g_pos >= tau, g_neg >= tau) {
        (true, false) => Verdict::Positive,
        (false, true) => Verdict::Negative,
        _ => Verdict::Ambiguous,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVerification {
    pub proven: Vec<Lemma>,
    pub failed: Vec<FailedPair>,
    pub budget_exhausted: bool,
}

/// Solves both sides of every pair as fresh problems and classifies them.
pub fn verify_hypotheses(
    session: &Session<'_>,
    pairs: &[HypothesisPair],
    tau: u8,
    lane: &Lane,
) -> PairVerification {
    let results = fan_out(session.config.concurrency, pairs.len(), |i| {
        verify_pair(session, &pairs[i], tau, &lane.child(format!("h{i}")))
    });
    let mut out = PairVerification::default();
    for (lemma, failure, exhausted) in results {
        out.proven.extend(lemma);
        out.failed.extend(failure);
        out.budget_exhausted |= exhausted;
    }
    out
}

fn verify_pair(
    session: &Session<'_>,
    pair: &HypothesisPair,
    tau: u8,
    lane: &Lane,
) -> (Option<Lemma>, Option<FailedPair>, bool) {
    let scope = session.config.pair_token_budget.map(BudgetScope::new);
    let sides = [("pos", &pair.conjecture), ("neg", &pair.negation)];
    let results = fan_out(session.config.concurrency, 2, |s| {
        let (tag, statement) = sides[s];
        let problem = Problem {
            id: format!("{}-{tag}", pair.id),
            statement: statement.clone(),
            additional_materials: None,
        };
        let spec = BranchSpec {
            context: SolveContext::empty(),
            origin: Origin::Fresh,
        };
        solve_branches(session, &problem, &[spec], &lane.child(tag), scope.as_ref())
    });
    let exhausted = results.iter().any(|r| r.budget_exhausted());
    let pos = results[0].solutions.first();
    let neg = results[1].solutions.first();
    let score = |c: Option<&CandidateSolution>| c.and_then(|c| c.score()).map(|s| s.value());
    let (g_pos, g_neg) = (score(pos), score(neg));
    let partial = [(pos, &pair.conjecture), (neg, &pair.negation)]
        .into_iter()
        .filter_map(|(c, stmt)| c.map(|c| (c, stmt)))
        .max_by_key(|(c, _)| c.score())
        .map(|(c, stmt)| {
            let grade = c.score().map(|s| s.to_string()).unwrap_or_default();
            format!("Attempt on \"{}\" (graded {grade}): {}", stmt.trim(), c.proof_text.trim())
        });

    let failed = |reason: FailureReason| FailedPair {
        pair: pair.clone(),
        reason,
        g_pos,
        g_neg,
        partial_progress: partial.clone(),
    };
    let (g_pos_v, g_neg_v) = match (g_pos, g_neg) {
        (Some(p), Some(n)) => (p, n),
        _ => {
            let f = failed(FailureReason::Unresolved);
            session.event(lane, EventKind::PairFailed, json!({ "pair": pair.id, "reason": f.reason, "g_pos": g_pos, "g_neg": g_neg }));
            return (None, Some(f), exhausted);
        }
    };
    let verdict = classify(g_pos_v, g_neg_v, tau);
    let proven = match verdict {
        Verdict::Positive => Some((Polarity::Positive, pos)),
        Verdict::Negative => Some((Polarity::Negative, neg)),
        Verdict::Ambiguous => None,
    };
    match proven {
        Some((polarity, Some(proof))) => {
            match Lemma::from_pair(pair, polarity, proof.proof_text.clone(), g_pos_v, g_neg_v, tau) {
                Ok(lemma) => {
                    session.event(
                        lane,
                        EventKind::PairResolved,
                        json!({ "pair": pair.id, "polarity": polarity, "g_pos": g_pos_v, "g_neg": g_neg_v, "tau": tau }),
                    );
                    (Some(lemma), None, exhausted)
                }
                Err(_) => (None, Some(failed(FailureReason::Ambiguous)), exhausted),
            }
        }
        _ => {
            let f = failed(FailureReason::Ambiguous);
            session.event(
                lane,
                EventKind::PairFailed,
                json!({ "pair": pair.id, "reason": f.reason, "g_pos": g_pos_v, "g_neg": g_neg_v, "tau": tau }),
            );
            (None, Some(f), exhausted)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_truth_table() {
        for g_pos in 0..=7u8 {
            for g_neg in 0..=7u8 {
                let v = classify(g_pos, g_neg, 7);
                let expected = if g_pos == 7 && g_neg < 7 {
                    Verdict::Positive
                } else if g_neg == 7 && g_pos < 7 {
                    Verdict::Negative
                } else {
                    Verdict::Ambiguous
                };
                assert_eq!(v, expected, "({g_pos}, {g_neg})");
            }
        }
        assert_eq!(classify(6, 3, 6), Verdict::Positive);
    }

    #[test]
    fn lint_flags_references() {
        assert!(!lint_self_contained("Let S be the set S from the proof; then S is finite.").is_empty());
        assert!(lint_self_contained("Every finite group of order 4 is abelian.").is_empty());
    }
}
