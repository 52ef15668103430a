//! Draft, censor, grade, refine, regrade.
//!
//! One *branch* is a fixed chain of calls:
//!
//! 1. `draft`: the solver writes a proof from the problem and context.
//! 2. `censor`: the answer processor scans it for hand-waving.
//! 3. `redraft` (only if the censor found something): the solver tries
//!    again, told to derive those steps explicitly.
//! 4. `grade`: a grader scores the draft and lists issues.
//! 5. `refine`: the solver revises using that feedback.
//! 6. `regrade`: the revision is graded; this is the branch's result.
//!
//! [`solve_branches`] runs several branches, possibly on threads, and
//! returns them in branch order.

pub mod grading;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::ledger::Usd;
use crate::gateway::{BudgetScope, ModelRole};
use crate::prompts::TemplateId;
use crate::session::{fan_out, Lane, Session};
use crate::trace::EventKind;
use crate::types::{
    digest, CandidateSolution, GradeReport, GraderVariant, Lemma, Origin, Polarity, Problem, Severity, SolverVariant,
};

pub use grading::{parse_grade, parse_processor, NO_ISSUES};

/// Feedback injected into a redraft when the censor flags the first draft.
pub const DERIVE_EXPLICITLY: &str = "Derive explicitly";

/// An earlier attempt shown to the solver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSolution {
    pub id: String,
    pub score: Option<u8>,
    pub proof_text: String,
}

/// What a solver sees besides the problem statement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveContext {
    pub lemmas: Vec<Lemma>,
    pub feedback: Vec<String>,
    pub scaffolding: Vec<String>,
    pub prior_solutions: Vec<PriorSolution>,
    /// Attempts on conjectures that could not be settled.
    pub partial_progress: Vec<String>,
}

impl SolveContext {
    pub fn empty() -> Self {
        SolveContext::default()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
            && self.feedback.is_empty()
            && self.scaffolding.is_empty()
            && self.prior_solutions.is_empty()
            && self.partial_progress.is_empty()
    }

    /// Adds a graded candidate: its text, its issues as feedback and its
    /// scaffolding questions.
    pub fn with_solution(mut self, candidate: &CandidateSolution) -> Self {
        if let Some(grade) = &candidate.grade {
            self.feedback.extend(grade.issues().iter().map(|i| {
                let tag = match i.severity {
                    Severity::Slip => "Slip",
                    Severity::Fallacy => "Fallacy",
                };
                format!("[{tag}] {}", i.text)
            }));
            self.scaffolding.extend(grade.scaffolding().iter().cloned());
        }
        self.prior_solutions.push(PriorSolution {
            id: candidate.id.clone(),
            score: candidate.score().map(|s| s.value()),
            proof_text: candidate.proof_text.clone(),
        });
        self
    }

    pub fn with_lemmas<'a>(mut self, lemmas: impl IntoIterator<Item = &'a Lemma>) -> Self {
        self.lemmas.extend(lemmas.into_iter().cloned());
        self
    }

    /// Proven lemmas only, in the same format [`render`](Self::render) uses.
    pub fn render_lemmas(&self) -> String {
        let mut out = String::new();
        if self.lemmas.is_empty() {
            return out;
        }
        out.push_str("## Proven lemmas\nEach statement below was proven independently and may be used without proof.\n");
        for (i, lemma) in self.lemmas.iter().enumerate() {
            let note = match lemma.polarity {
                Polarity::Positive => "proven",
                Polarity::Negative => "proven; the opposite claim is false",
            };
            let _ = write!(out, "\n{}. [{note}] {}\nProof: {}\n", i + 1, lemma.statement.trim(), lemma.proof_text.trim());
        }
        out
    }

    /// Deterministic text for the "Additional Materials" slot: lemmas,
    /// then feedback, then prior solutions.
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if !self.lemmas.is_empty() {
            parts.push(self.render_lemmas());
        }
        if !self.feedback.is_empty() {
            parts.push(bullets("## Grader feedback on earlier attempts", &self.feedback));
        }
        if !self.scaffolding.is_empty() {
            parts.push(bullets("## Scaffolding questions", &self.scaffolding));
        }
        if !self.prior_solutions.is_empty() {
            let mut out = String::from("## Earlier solutions\n");
            for (i, s) in self.prior_solutions.iter().enumerate() {
                let grade = s.score.map(|g| format!(" (graded {g}/7)")).unwrap_or_default();
                let _ = write!(out, "\n### Earlier solution {}{grade}\n{}\n", i + 1, s.proof_text.trim());
            }
            parts.push(out);
        }
        if !self.partial_progress.is_empty() {
            parts.push(bullets("## Partial progress on unresolved conjectures", &self.partial_progress));
        }
        parts.join("\n")
    }

    pub fn digest(&self) -> String {
        digest(&self.render())
    }
}

fn bullets(title: &str, items: &[String]) -> String {
    let mut out = format!("{title}\n");
    for item in items {
        let _ = writeln!(out, "- {}", item.trim());
    }
    out
}

/// Joins non-empty material blocks with a blank line.
pub fn join_materials<'a>(blocks: impl IntoIterator<Item = &'a str>) -> String {
    blocks
        .into_iter()
        .map(str::trim)
        .filter(|b| !b.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub context: SolveContext,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub index: usize,
    pub lane: String,
    pub error: String,
    pub budget_exhausted: bool,
}

/// Completed branches in branch order, plus what went wrong with the rest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SolveOutcome {
    pub solutions: Vec<CandidateSolution>,
    pub failures: Vec<BranchFailure>,
}

impl SolveOutcome {
    pub fn budget_exhausted(&self) -> bool {
        self.failures.iter().any(|f| f.budget_exhausted)
    }
}

fn solver_template(session: &Session<'_>) -> TemplateId {
    match session.config.solver_variant {
        SolverVariant::DialecticEngine => TemplateId::Solver,
        SolverVariant::PromptEngineered => TemplateId::SolverEngineered,
    }
}

fn grader_template(variant: GraderVariant) -> TemplateId {
    match variant {
        GraderVariant::Simplified => TemplateId::GraderSimplified,
        GraderVariant::Council => TemplateId::GraderCouncil,
    }
}

/// `count` independent branches sharing one context.
pub fn dialectic_solve(
    session: &Session<'_>,
    problem: &Problem,
    context: &SolveContext,
    count: usize,
    origin: Origin,
    lane: &Lane,
) -> Result<SolveOutcome> {
    if count == 0 {
        return Err(Error::Invalid("dialectic_solve needs count >= 1".into()));
    }
    let specs = vec![
        BranchSpec {
            context: context.clone(),
            origin,
        };
        count
    ];
    Ok(solve_branches(session, problem, &specs, lane, None))
}

/// Runs one branch per spec under `lane/b{i}`.
pub fn solve_branches(
    session: &Session<'_>,
    problem: &Problem,
    specs: &[BranchSpec],
    lane: &Lane,
    scope: Option<&BudgetScope>,
) -> SolveOutcome {
    let results = fan_out(session.config.concurrency, specs.len(), |i| {
        let branch_lane = lane.child(format!("b{i}"));
        let result = run_branch(session, problem, &specs[i], &branch_lane, scope);
        (branch_lane, result)
    });
    let mut outcome = SolveOutcome::default();
    for (index, (branch_lane, result)) in results.into_iter().enumerate() {
        match result {
            Ok(candidate) => outcome.solutions.push(candidate),
            Err(err) => {
                let failure = BranchFailure {
                    index,
                    lane: branch_lane.to_string(),
                    error: err.to_string(),
                    budget_exhausted: err.is_budget_exhausted(),
                };
                session.event(&branch_lane, EventKind::BranchFailed, json!(failure));
                outcome.failures.push(failure);
            }
        }
    }
    outcome
}

fn run_branch(
    session: &Session<'_>,
    problem: &Problem,
    spec: &BranchSpec,
    lane: &Lane,
    scope: Option<&BudgetScope>,
) -> Result<CandidateSolution> {
    let mut cost = Usd::ZERO;
    let template = solver_template(session);
    let context_text = spec.context.render();
    let materials = join_materials([problem.additional_materials.as_deref().unwrap_or(""), &context_text]);
    let grader_materials = join_materials([
        problem.additional_materials.as_deref().unwrap_or(""),
        &spec.context.render_lemmas(),
    ]);

    let solve = |materials: &str, step: &str, cost: &mut Usd| -> Result<String> {
        let response = session.call(
            ModelRole::Solver,
            template,
            &[("problem", &problem.statement), ("additional_materials", materials)],
            &lane.child(step),
            scope,
        )?;
        *cost += response.usd;
        if response.text.trim().is_empty() {
            return Err(Error::Invalid(format!("solver returned an empty proof on {lane}/{step}")));
        }
        Ok(response.text)
    };

    let mut draft = solve(&materials, "draft", &mut cost)?;
    session.event(lane, EventKind::Draft, json!({ "digest": digest(&draft), "context_digest": digest(&context_text) }));

    let (issues, usd) = lazy_phrase_check(session, &draft, &lane.child("censor"), scope)?;
    cost += usd;
    session.event(lane, EventKind::Censor, json!({ "issues": issues }));
    if !issues.is_empty() {
        let mut note = format!("## Your previous draft\n{}\n\n## Feedback\n{DERIVE_EXPLICITLY}.\n", draft.trim());
        for issue in &issues {
            let _ = writeln!(note, "- {issue}");
        }
        let redraft_materials = join_materials([materials.as_str(), &note]);
        draft = solve(&redraft_materials, "redraft", &mut cost)?;
        session.event(lane, EventKind::Redraft, json!({ "digest": digest(&draft) }));
    }

    let (first, usd) = grade(
        session,
        problem,
        &draft,
        &grader_materials,
        session.config.feedback_grader,
        &lane.child("grade"),
        EventKind::Grade,
        scope,
    )?;
    cost += usd;

    let mut note = format!(
        "## Your previous draft (graded {})\n{}\n\n## Grader feedback on that draft\n",
        first.score(),
        draft.trim()
    );
    if first.issues().is_empty() {
        note.push_str("- No issues were listed.\n");
    }
    for issue in first.issues() {
        let _ = writeln!(note, "- [{:?}] {}", issue.severity, issue.text);
    }
    if !first.scaffolding().is_empty() {
        note.push_str("\n## Scaffolding questions\n");
        for q in first.scaffolding() {
            let _ = writeln!(note, "- {q}");
        }
    }
    let refine_materials = join_materials([materials.as_str(), &note]);
    let refined = solve(&refine_materials, "refine", &mut cost)?;
    session.event(lane, EventKind::Refine, json!({ "digest": digest(&refined) }));

    let (second, usd) = grade(
        session,
        problem,
        &refined,
        &grader_materials,
        session.config.inner_grader,
        &lane.child("regrade"),
        EventKind::Regrade,
        scope,
    )?;
    cost += usd;

    let candidate = CandidateSolution {
        id: lane.id(),
        problem_id: problem.id.clone(),
        proof_text: refined,
        origin: spec.origin,
        phase: lane.phase,
        grade: Some(second),
        context_digest: digest(&context_text),
        cost,
    };
    candidate.validate()?;
    session.event(
        lane,
        EventKind::BranchDone,
        json!({
            "candidate": candidate.id,
            "score": candidate.score().map(|s| s.value()),
            "digest": digest(&candidate.proof_text),
            "usd": cost,
        }),
    );
    Ok(candidate)
}

/// Asks the answer processor for obvious gaps. Returns the issues and the
/// call's cost.
pub fn lazy_phrase_check(
    session: &Session<'_>,
    proof_text: &str,
    lane: &Lane,
    scope: Option<&BudgetScope>,
) -> Result<(Vec<String>, Usd)> {
    let response = session.call(
        ModelRole::Processor,
        TemplateId::AnswerProcessor,
        &[("solution", proof_text)],
        lane,
        scope,
    )?;
    Ok((parse_processor(&response.text), response.usd))
}

/// One grader call, parsed. Records an event of `kind`.
#[allow(clippy::too_many_arguments)]
pub fn grade(
    session: &Session<'_>,
    problem: &Problem,
    proof_text: &str,
    materials: &str,
    variant: GraderVariant,
    lane: &Lane,
    kind: EventKind,
    scope: Option<&BudgetScope>,
) -> Result<(GradeReport, Usd)> {
    let response = session.call(
        ModelRole::Grader,
        grader_template(variant),
        &[
            ("problem", &problem.statement),
            ("solution", proof_text),
            ("additional_materials", materials),
        ],
        lane,
        scope,
    )?;
    let report = parse_grade(&response.text)?;
    session.event(
        lane,
        kind,
        json!({
            "digest": digest(proof_text),
            "score": report.score().value(),
            "slips": report.issues().iter().filter(|i| i.severity == Severity::Slip).count(),
            "fallacies": report.issues().iter().filter(|i| i.severity == Severity::Fallacy).count(),
            "perfect": report.is_perfect(),
            "coercions": report.coercions(),
        }),
    );
    Ok((report, response.usd))
}

/// Result of the repeated perfect-grade check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub passed: bool,
    pub grades: Vec<GradeReport>,
}

/// Grades `candidate` up to `n` times, stopping at the first grade that is
/// not 7/7 with zero issues. Passes only if all `n` grades are perfect.
pub fn verified_success(
    session: &Session<'_>,
    problem: &Problem,
    candidate: &CandidateSolution,
    n: u32,
    materials: &str,
    lane: &Lane,
) -> Result<Verification> {
    if n == 0 {
        return Err(Error::Invalid("verified_success needs n >= 1".into()));
    }
    let mut grades = Vec::new();
    for i in 0..n {
        let (report, _) = grade(
            session,
            problem,
            &candidate.proof_text,
            materials,
            session.config.inner_grader,
            &lane.child(format!("v{i}")),
            EventKind::Verify,
            None,
        )?;
        let perfect = report.is_perfect();
        grades.push(report);
        if !perfect {
            return Ok(Verification { passed: false, grades });
        }
    }
    Ok(Verification { passed: true, grades })
}

/// `n` independent grades with no short-circuit.
pub fn grade_independent(
    session: &Session<'_>,
    problem: &Problem,
    candidate: &CandidateSolution,
    n: u32,
    materials: &str,
    lane: &Lane,
) -> Result<Vec<GradeReport>> {
    (0..n)
        .map(|i| {
            grade(
                session,
                problem,
                &candidate.proof_text,
                materials,
                session.config.inner_grader,
                &lane.child(format!("g{i}")),
                EventKind::Verify,
                None,
            )
            .map(|(r, _)| r)
        })
        .collect()
}
