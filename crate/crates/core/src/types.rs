//! Domain types shared by every stage of the pipeline.
//!
//! Nothing in here talks to a model or touches the filesystem. Every type
//! has a canonical serde form (stable snake_case field names, scores as
//! integers); the run trace is written in exactly this form.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::ledger::Usd;
use crate::gateway::ModelRole;

/// Short, stable content hash used for context digests and trace payloads.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hex::encode(&hash[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    /// Unverified hints supplied alongside the statement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub additional_materials: Option<String>,
}

impl Problem {
    pub fn new(id: impl Into<String>, statement: impl Into<String>) -> Result<Self> {
        let problem = Problem {
            id: id.into(),
            statement: statement.into(),
            additional_materials: None,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_materials(mut self, materials: impl Into<String>) -> Self {
        let materials = materials.into();
        self.additional_materials = if materials.trim().is_empty() {
            None
        } else {
            Some(materials)
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.statement.trim().is_empty() {
            return Err(Error::Invalid("problem statement is empty".into()));
        }
        if self.id.trim().is_empty() {
            return Err(Error::Invalid("problem id is empty".into()));
        }
        Ok(())
    }
}

/// How a candidate came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Solved with no injected context.
    Fresh,
    /// Phase 1: conditioned on an earlier candidate and its feedback.
    Contextual,
    /// Conditioned on lemma memory and the best earlier solution.
    Guided,
    /// Produced by the post-enhancement step.
    PostEnhanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Slip,
    Fallacy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub text: String,
    pub severity: Severity,
}

impl Issue {
    pub fn slip(text: impl Into<String>) -> Self {
        Issue {
            text: text.into(),
            severity: Severity::Slip,
        }
    }

    pub fn fallacy(text: impl Into<String>) -> Self {
        Issue {
            text: text.into(),
            severity: Severity::Fallacy,
        }
    }
}

/// A grade on the 0-7 scale. 5 is not a legal grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Score(u8);

impl Score {
    pub const PERFECT: Score = Score(7);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0..=4 | 6 | 7 => Ok(Score(value)),
            5 => Err(Error::Invalid("a score of 5 is disallowed".into())),
            _ => Err(Error::Invalid(format!("score {value} is outside 0..=7"))),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Score {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Score::new(value)
    }
}

impl From<Score> for u8 {
    fn from(score: Score) -> u8 {
        score.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/7", self.0)
    }
}

/// Parsed verdict of one grader call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGradeReport")]
pub struct GradeReport {
    score: Score,
    issues: Vec<Issue>,
    scaffolding: Vec<String>,
    transcript: String,
    /// Adjustments applied while turning the raw transcript into a legal report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    coercions: Vec<String>,
}

#[derive(Deserialize)]
struct RawGradeReport {
    score: Score,
    issues: Vec<Issue>,
    scaffolding: Vec<String>,
    transcript: String,
    #[serde(default)]
    coercions: Vec<String>,
}

impl TryFrom<RawGradeReport> for GradeReport {
    type Error = Error;

    fn try_from(raw: RawGradeReport) -> Result<Self> {
        let mut report = GradeReport::new(raw.score, raw.issues, raw.scaffolding, raw.transcript)?;
        report.coercions = raw.coercions;
        Ok(report)
    }
}

impl GradeReport {
    /// Rejects a perfect score that still lists issues, and any fallacy
    /// paired with a score above 3.
    pub fn new(
        score: Score,
        issues: Vec<Issue>,
        scaffolding: Vec<String>,
        transcript: impl Into<String>,
    ) -> Result<Self> {
        if score == Score::PERFECT && !issues.is_empty() {
            return Err(Error::Invalid("a 7/7 grade cannot list issues".into()));
        }
        if score.value() > 3 && issues.iter().any(|i| i.severity == Severity::Fallacy) {
            return Err(Error::Invalid(
                "a fallacy caps the score at 3".into(),
            ));
        }
        Ok(GradeReport {
            score,
            issues,
            scaffolding,
            transcript: transcript.into(),
            coercions: Vec::new(),
        })
    }

    pub fn with_coercions(mut self, coercions: Vec<String>) -> Self {
        self.coercions = coercions;
        self
    }

    pub fn score(&self) -> Score {
        self.score
    }

    pub fn issues(&self) -> &[Issue] {
        &self.issues
    }

    pub fn scaffolding(&self) -> &[String] {
        &self.scaffolding
    }

    pub fn transcript(&self) -> &str {
        &self.transcript
    }

    pub fn coercions(&self) -> &[String] {
        &self.coercions
    }

    /// 7/7 with nothing flagged.
    pub fn is_perfect(&self) -> bool {
        self.score == Score::PERFECT && self.issues.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub id: String,
    pub problem_id: String,
    pub proof_text: String,
    pub origin: Origin,
    pub phase: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeReport>,
    pub context_digest: String,
    /// Cost of the calls that produced this candidate (its own branch only).
    pub cost: Usd,
}

impl CandidateSolution {
    pub fn validate(&self) -> Result<()> {
        if self.proof_text.trim().is_empty() {
            return Err(Error::Invalid(format!("candidate {} has no proof text", self.id)));
        }
        if !(1..=4).contains(&self.phase) {
            return Err(Error::Invalid(format!("phase {} is outside 1..=4", self.phase)));
        }
        Ok(())
    }

    pub fn score(&self) -> Option<Score> {
        self.grade.as_ref().map(GradeReport::score)
    }
}

/// Ordering used by [`best`]: higher score, then fewer issues, then lower
/// cost, then lexicographically smaller id. `Less` means `a` ranks first.
pub fn rank(a: &CandidateSolution, b: &CandidateSolution) -> Ordering {
    let key = |s: &CandidateSolution| {
        s.grade
            .as_ref()
            .map(|g| (g.score().value(), g.issues().len()))
            .unwrap_or((0, usize::MAX))
    };
    let (sa, ia) = key(a);
    let (sb, ib) = key(b);
    sb.cmp(&sa)
        .then(ia.cmp(&ib))
        .then(a.cost.cmp(&b.cost))
        .then_with(|| a.id.cmp(&b.id))
}

/// The highest-ranked graded candidate.
pub fn best<'a, I>(solutions: I) -> Result<&'a CandidateSolution>
where
    I: IntoIterator<Item = &'a CandidateSolution>,
{
    let mut winner: Option<&CandidateSolution> = None;
    for candidate in solutions {
        if candidate.grade.is_none() {
            return Err(Error::Ungraded(candidate.id.clone()));
        }
        winner = match winner {
            Some(w) if rank(w, candidate) != Ordering::Greater => Some(w),
            _ => Some(candidate),
        };
    }
    winner.ok_or(Error::NoCandidates)
}

/// Candidates sorted best-first.
pub fn ranked(solutions: &[CandidateSolution]) -> Vec<&CandidateSolution> {
    let mut out: Vec<_> = solutions.iter().filter(|s| s.grade.is_some()).collect();
    out.sort_by(|a, b| rank(a, b));
    out
}

/// A conjecture and its self-contained negation, verified as a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisPair {
    pub id: String,
    pub conjecture: String,
    pub negation: String,
    #[serde(default)]
    pub source_solution_ids: Vec<String>,
}

impl HypothesisPair {
    pub fn new(
        id: impl Into<String>,
        conjecture: impl Into<String>,
        negation: impl Into<String>,
        source_solution_ids: Vec<String>,
    ) -> Result<Self> {
        let pair = HypothesisPair {
            id: id.into(),
            conjecture: conjecture.into(),
            negation: negation.into(),
            source_solution_ids,
        };
        if pair.conjecture.trim().is_empty() || pair.negation.trim().is_empty() {
            return Err(Error::Invalid(format!("pair {} has an empty side", pair.id)));
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// The conjecture itself was proven.
    Positive,
    /// The negation was proven.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lemma {
    pub statement: String,
    pub polarity: Polarity,
    pub proof_text: String,
    pub g_pos: u8,
    pub g_neg: u8,
    /// Acceptance threshold the grades were compared against.
    pub threshold: u8,
    pub pair_id: String,
}

impl Lemma {
    /// Builds the lemma for whichever side of `pair` cleared `threshold`.
    /// Fails unless exactly one side did and it matches `polarity`.
    pub fn from_pair(
        pair: &HypothesisPair,
        polarity: Polarity,
        proof_text: impl Into<String>,
        g_pos: u8,
        g_neg: u8,
        threshold: u8,
    ) -> Result<Self> {
        let pos = g_pos >= threshold;
        let neg = g_neg >= threshold;
        let ok = match polarity {
            Polarity::Positive => pos && !neg,
            Polarity::Negative => neg && !pos,
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "grades ({g_pos}, {g_neg}) at threshold {threshold} do not prove the {polarity:?} side of {}",
                pair.id
            )));
        }
        let statement = match polarity {
            Polarity::Positive => pair.conjecture.clone(),
            Polarity::Negative => pair.negation.clone(),
        };
        Ok(Lemma {
            statement,
            polarity,
            proof_text: proof_text.into(),
            g_pos,
            g_neg,
            threshold,
            pair_id: pair.id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// Both sides or neither side cleared the threshold.
    Ambiguous,
    /// A side could not be completed (model or budget failure).
    Unresolved,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::Ambiguous => f.write_str("Ambiguous"),
            FailureReason::Unresolved => f.write_str("Unresolved"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPair {
    pub pair: HypothesisPair,
    pub reason: FailureReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_pos: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_neg: Option<u8>,
    /// Best attempt on either side, kept as partial progress.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_progress: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    /// Fan-outs run one branch at a time in index order. Required for
    /// byte-identical replay against a scripted backend.
    #[default]
    Sequential,
    /// Fan-outs run on scoped threads.
    Threads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraderVariant {
    #[default]
    Simplified,
    Council,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverVariant {
    #[default]
    DialecticEngine,
    PromptEngineered,
}

/// Per-role sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSettings {
    pub temperature: f64,
    pub max_output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Phase 1 iterations.
    pub l0: u32,
    /// Conjecture (Phase 2/3) iterations.
    pub l: u32,
    /// Solver width.
    pub k: u32,
    pub tau: u8,
    pub tau_e: u8,
    /// Independent perfect grades needed to accept a solution.
    pub verify_repeats: u32,
    /// Maximum hypothesis pairs kept per extraction.
    pub extraction_budget: u32,
    /// Seeds handed to the extractor.
    pub seed_count: u32,
    pub parallel_runs: u32,
    pub token_budget: u64,
    /// Reserve a call's full `max_output_tokens` before admitting it, so the
    /// budget is never overshot.
    pub strict_budget: bool,
    /// Optional cap shared by the two sides of one hypothesis pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_token_budget: Option<u64>,
    /// How many memory entries are serialized into prompts.
    pub memory_prompt_cap: usize,
    pub concurrency: Concurrency,
    pub solver_variant: SolverVariant,
    pub inner_grader: GraderVariant,
    pub feedback_grader: GraderVariant,
    pub roles: BTreeMap<ModelRole, RoleSettings>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::pb_adv()
    }
}

impl PipelineConfig {
    /// Widths, thresholds and budgets used for the advanced proof benchmark:
    /// K=4, N=3, τ=7, τ_e=6, k=3, two parallel runs, three outer iterations.
    pub fn pb_adv() -> Self {
        PipelineConfig {
            l0: 1,
            l: 3,
            k: 4,
            tau: 7,
            tau_e: 6,
            verify_repeats: 3,
            extraction_budget: 3,
            seed_count: 2,
            parallel_runs: 2,
            token_budget: 20_000_000,
            strict_budget: false,
            pair_token_budget: None,
            memory_prompt_cap: 3,
            concurrency: Concurrency::Sequential,
            solver_variant: SolverVariant::DialecticEngine,
            inner_grader: GraderVariant::Simplified,
            feedback_grader: GraderVariant::Council,
            roles: default_roles(0.6, 0.1),
        }
    }

    /// Same shape with every role sampled at T=1.0.
    pub fn uniform_temperature() -> Self {
        PipelineConfig {
            roles: default_roles(1.0, 1.0),
            ..PipelineConfig::pb_adv()
        }
    }

    pub fn role(&self, role: ModelRole) -> RoleSettings {
        self.roles.get(&role).cloned().unwrap_or(RoleSettings {
            temperature: if role.is_generative() { 0.6 } else { 0.1 },
            max_output_tokens: 32_000,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k < 1 {
            return fail("k (solver width) must be at least 1".into());
        }
        if !(self.tau_e < self.tau && self.tau <= 7) {
            return fail(format!(
                "thresholds must satisfy tau_e < tau <= 7 (got tau_e={}, tau={})",
                self.tau_e, self.tau
            ));
        }
        if self.l0 < 1 {
            return fail("l0 must be at least 1".into());
        }
        if self.verify_repeats < 1 || self.extraction_budget < 1 || self.seed_count < 1 {
            return fail("verify_repeats, extraction_budget and seed_count must be positive".into());
        }
        if self.parallel_runs < 1 {
            return fail("parallel_runs must be at least 1".into());
        }
        if self.token_budget == 0 {
            return fail("token_budget must be positive".into());
        }
        if self.pair_token_budget == Some(0) {
            return fail("pair_token_budget must be positive when set".into());
        }
        for (role, settings) in &self.roles {
            if settings.temperature.is_nan() || settings.temperature < 0.0 {
                return fail(format!("temperature for {role} must be >= 0"));
            }
            if settings.max_output_tokens == 0 {
                return fail(format!("max_output_tokens for {role} must be positive"));
            }
        }
        Ok(())
    }
}

fn default_roles(generate: f64, verify: f64) -> BTreeMap<ModelRole, RoleSettings> {
    ModelRole::ALL
        .iter()
        .map(|&role| {
            let temperature = if role.is_generative() { generate } else { verify };
            (
                role,
                RoleSettings {
                    temperature,
                    max_output_tokens: 32_000,
                },
            )
        })
        .collect()
}

/// One (human, predicted) grade pair for grader evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingRecord {
    pub human: u8,
    /// May be fractional before rounding.
    pub predicted: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
}

impl GradingRecord {
    pub fn new(human: u8, predicted: f64) -> Result<Self> {
        let record = GradingRecord {
            human,
            predicted,
            problem_id: None,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.human > 7 {
            return Err(Error::Invalid(format!("human grade {} is outside 0..=7", self.human)));
        }
        if !(0.0..=7.0).contains(&self.predicted) {
            return Err(Error::Invalid(format!(
                "predicted grade {} is outside 0..=7",
                self.predicted
            )));
        }
        Ok(())
    }
}

/// Where a run currently is in the phase state machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Phase1 { iteration: u32 },
    Phase2 { iteration: u32 },
    Phase3 { iteration: u32 },
    Phase4,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub phase1_iter: u32,
    pub conjecture_iter: u32,
}

/// Full mutable state of one pipeline run.
///
/// `lemma_memory` and `failure_context` only ever grow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run: u32,
    pub problem: Problem,
    pub config: PipelineConfig,
    pub stage: Stage,
    /// Phase 1 working set (S_base).
    pub base: Vec<CandidateSolution>,
    pub solution_memory: Vec<CandidateSolution>,
    pub lemma_memory: Vec<Lemma>,
    pub failure_context: Vec<FailedPair>,
    pub counters: Counters,
    /// Best candidate at the end of each stage, in order; shown to the judge.
    pub history: Vec<CandidateSolution>,
    pub budget_exhausted: bool,
    /// Set once a candidate passes the repeated perfect-grade gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<CandidateSolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_solution: Option<CandidateSolution>,
}

impl RunState {
    pub fn new(run: u32, problem: Problem, config: PipelineConfig) -> Self {
        RunState {
            run,
            problem,
            config,
            stage: Stage::Phase1 { iteration: 1 },
            base: Vec::new(),
            solution_memory: Vec::new(),
            lemma_memory: Vec::new(),
            failure_context: Vec::new(),
            counters: Counters::default(),
            history: Vec::new(),
            budget_exhausted: false,
            verified: None,
            final_solution: None,
        }
    }

    /// Adds lemmas not already present (by statement). Returns how many were new.
    pub fn add_lemmas(&mut self, lemmas: impl IntoIterator<Item = Lemma>) -> usize {
        let mut added = 0;
        for lemma in lemmas {
            if !self.lemma_memory.iter().any(|l| l.statement == lemma.statement) {
                self.lemma_memory.push(lemma);
                added += 1;
            }
        }
        added
    }

    pub fn add_failures(&mut self, failures: impl IntoIterator<Item = FailedPair>) {
        self.failure_context.extend(failures);
    }

    /// Best graded candidate seen anywhere in this run.
    pub fn best_so_far(&self) -> Option<&CandidateSolution> {
        if let Some(v) = &self.verified {
            return Some(v);
        }
        best(
            self.solution_memory
                .iter()
                .chain(self.base.iter())
                .filter(|s| s.grade.is_some()),
        )
        .ok()
    }
}
