//! The four-phase pipeline, parallel runs and resumption.
//!
//! A run moves through [`Stage`]s: Phase 1 explores with feedback, then each
//! conjecture iteration extracts and bisects hypotheses (Phase 2) and solves
//! again with the proven lemmas (Phase 3). If nothing passes the perfect-grade
//! gate, Phase 4 tries to close the remaining gaps of the best candidate.
//! Every stage starts with a checkpoint when a checkpoint directory is set.

pub mod checkpoint;
pub mod judge;
pub mod plan;

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conjecture::{extract_hypotheses, verify_hypotheses, PairVerification};
use crate::dialectic::{
    grade_independent, join_materials, solve_branches, verified_success, BranchSpec, SolveContext, SolveOutcome,
};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::prompts::Registry;
use crate::session::{fan_out, Lane, Session};
use crate::trace::{EventKind, Trace};
use crate::types::{best, digest, ranked, CandidateSolution, GradeReport, Origin, PipelineConfig, Problem, RunState, Stage};

pub use checkpoint::{Checkpoint, FinalRecord, CHECKPOINT_VERSION};
pub use judge::{judge, parse_decision, JudgeDecision, Winner};
pub use plan::{call_ceiling, run_ceiling, CallCeiling};

/// Header of the materials block that carries Phase 4 grading reports.
pub const GRADING_REPORTS: &str = "## Independent grading reports";

/// Candidates best-first with duplicate texts removed.
fn distinct_ranked(memory: &[CandidateSolution]) -> Vec<&CandidateSolution> {
    let mut seen = Vec::new();
    ranked(memory)
        .into_iter()
        .filter(|c| {
            let d = digest(&c.proof_text);
            if seen.contains(&d) {
                false
            } else {
                seen.push(d);
                true
            }
        })
        .collect()
}

/// Context built from the `k`-th best distinct solution (1-based); empty
/// when fewer than `k` exist.
pub fn select_kth_top(memory: &[CandidateSolution], k: usize) -> SolveContext {
    match distinct_ranked(memory).get(k.saturating_sub(1)) {
        Some(c) if k >= 1 => SolveContext::empty().with_solution(c),
        _ => SolveContext::empty(),
    }
}

/// The `n` best distinct solutions.
pub fn select_top(memory: &[CandidateSolution], n: usize) -> Vec<CandidateSolution> {
    distinct_ranked(memory).into_iter().take(n).cloned().collect()
}

/// How a solve ended; maps onto the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Verified,
    BestEffort,
    BudgetExhausted,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Verified => 0,
            Status::BestEffort => 10,
            Status::BudgetExhausted => 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub solution: Option<CandidateSolution>,
    pub status: Status,
    pub runs: Vec<RunState>,
    pub judge: Vec<JudgeDecision>,
}

impl Outcome {
    fn record(&self) -> FinalRecord {
        FinalRecord {
            solution: self.solution.clone(),
            verified: self.status == Status::Verified,
            budget_exhausted: self.runs.iter().any(|r| r.budget_exhausted),
            judge: self.judge.clone(),
        }
    }
}

/// Drives runs against a shared gateway and trace.
pub struct Engine<'a> {
    pub gateway: &'a Gateway,
    pub registry: &'a Registry,
    pub trace: &'a Trace,
    pub checkpoint_dir: Option<PathBuf>,
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, registry: &'a Registry, trace: &'a Trace) -> Self {
        Engine {
            gateway,
            registry,
            trace,
            checkpoint_dir: None,
        }
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn session<'s>(&'s self, config: &'s PipelineConfig, run: Option<u32>) -> Session<'s> {
        Session {
            gateway: self.gateway,
            registry: self.registry,
            config,
            trace: self.trace,
            run,
        }
    }

    /// Runs `config.parallel_runs` independent pipelines and lets the judge
    /// pick among their finals.
    pub fn solve(&self, problem: &Problem, config: &PipelineConfig) -> Result<Outcome> {
        problem.validate()?;
        config.validate()?;
        self.drive(problem, config, Vec::new(), None)
    }

    /// A single pipeline run.
    pub fn run_pipeline(&self, problem: &Problem, config: &PipelineConfig) -> Result<RunState> {
        problem.validate()?;
        config.validate()?;
        let mut state = RunState::new(0, problem.clone(), config.clone());
        self.start_run(&state);
        self.advance(&mut state, &[])?;
        Ok(state)
    }

    /// Continues from a checkpoint. The trace must already hold exactly the
    /// events that preceded it.
    pub fn resume(&self, checkpoint: Checkpoint) -> Result<Outcome> {
        if checkpoint.template_version != self.registry.version() {
            return Err(Error::Resume(format!(
                "checkpoint was written with templates {} but {} are loaded",
                checkpoint.template_version,
                self.registry.version()
            )));
        }
        if self.trace.len() != checkpoint.trace_len {
            return Err(Error::Resume(format!(
                "trace holds {} events but the checkpoint follows event {}",
                self.trace.len(),
                checkpoint.trace_len
            )));
        }
        if let Some(record) = checkpoint.outcome {
            let mut runs = checkpoint.completed;
            if runs.is_empty() {
                runs.push(checkpoint.state);
            }
            let status = status_of(record.solution.as_ref(), &runs);
            return Ok(Outcome {
                solution: record.solution,
                status,
                runs,
                judge: record.judge,
            });
        }
        self.gateway
            .restore(&checkpoint.gateway)
            .map_err(|e| Error::Resume(e.to_string()))?;
        let problem = checkpoint.state.problem.clone();
        let config = checkpoint.state.config.clone();
        self.drive(&problem, &config, checkpoint.completed, Some(checkpoint.state))
    }

    fn drive(
        &self,
        problem: &Problem,
        config: &PipelineConfig,
        mut completed: Vec<RunState>,
        mut current: Option<RunState>,
    ) -> Result<Outcome> {
        let runs = config.parallel_runs.max(1);
        if self.checkpoint_dir.is_some() && runs > 1 && config.concurrency != crate::types::Concurrency::Sequential {
            return Err(Error::Config("checkpoints need sequential execution".into()));
        }
        let pending: Vec<u32> = (completed.len() as u32..runs).collect();
        if self.checkpoint_dir.is_none() && current.is_none() && completed.is_empty() {
            let finished = fan_out(config.concurrency, pending.len(), |i| {
                let mut state = RunState::new(pending[i], problem.clone(), config.clone());
                self.start_run(&state);
                self.advance(&mut state, &[]).map(|_| state)
            });
            for state in finished {
                completed.push(state?);
            }
        } else {
            for run in pending {
                let mut state = match current.take() {
                    Some(state) => state,
                    None => {
                        let state = RunState::new(run, problem.clone(), config.clone());
                        self.start_run(&state);
                        state
                    }
                };
                self.advance(&mut state, &completed)?;
                completed.push(state);
            }
        }
        self.finish(problem, config, completed)
    }

    fn finish(&self, problem: &Problem, config: &PipelineConfig, runs: Vec<RunState>) -> Result<Outcome> {
        let session = self.session(config, None);
        let finals: Vec<(usize, &CandidateSolution)> = runs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.final_solution.as_ref().map(|s| (i, s)))
            .collect();
        let mut decisions = Vec::new();
        let mut champion = finals.first().copied();
        for (step, &(i, candidate)) in finals.iter().enumerate().skip(1) {
            let (c, current) = champion.expect("set from the first final");
            let lane = Lane::new(0, format!("judge/m{step}"));
            let decision = judge(&session, problem, (&runs[c], current), (&runs[i], candidate), &lane)?;
            if decision.winner == Winner::B {
                champion = Some((i, candidate));
            }
            decisions.push(decision);
        }
        let solution = champion.map(|(_, s)| s.clone());
        let status = status_of(solution.as_ref(), &runs);
        session.event(
            &Lane::new(0, "final"),
            EventKind::Final,
            json!({
                "solution": solution.as_ref().map(|s| &s.id),
                "digest": solution.as_ref().map(|s| digest(&s.proof_text)),
                "score": solution.as_ref().and_then(|s| s.score()).map(|s| s.value()),
                "status": status,
            }),
        );
        let outcome = Outcome {
            solution,
            status,
            runs,
            judge: decisions,
        };
        if let Some(dir) = &self.checkpoint_dir {
            let last = outcome.runs.last().cloned().expect("at least one run");
            Checkpoint {
                id: "final".into(),
                version: CHECKPOINT_VERSION,
                template_version: self.registry.version(),
                state: last,
                completed: outcome.runs.clone(),
                gateway: self.gateway.snapshot(),
                trace_len: self.trace.len(),
                outcome: Some(outcome.record()),
            }
            .save(dir)?;
        }
        Ok(outcome)
    }

    fn start_run(&self, state: &RunState) {
        let session = self.session(&state.config, Some(state.run));
        session.event(
            &Lane::new(0, session.run_id()),
            EventKind::RunStart,
            json!({ "problem": state.problem.id, "digest": digest(&state.problem.statement) }),
        );
    }

    /// Steps `state` until it is done.
    fn advance(&self, state: &mut RunState, completed: &[RunState]) -> Result<()> {
        let config = state.config.clone();
        let session = self.session(&config, Some(state.run));
        let run_lane = session.run_id();
        while state.stage != Stage::Done {
            let (phase, tag) = stage_lane(&state.stage);
            let lane = Lane::new(phase, format!("{run_lane}/{tag}"));
            if let Some(dir) = &self.checkpoint_dir {
                let id = lane.id();
                Checkpoint {
                    id: id.clone(),
                    version: CHECKPOINT_VERSION,
                    template_version: self.registry.version(),
                    state: state.clone(),
                    completed: completed.to_vec(),
                    gateway: self.gateway.snapshot(),
                    trace_len: self.trace.len(),
                    outcome: None,
                }
                .save(dir)?;
                session.event(&lane, EventKind::Checkpoint, json!({ "id": id }));
            }
            session.event(&lane, EventKind::PhaseStart, json!({ "stage": state.stage }));
            let result = match state.stage.clone() {
                Stage::Phase1 { iteration } => phase1(&session, state, iteration, &lane),
                Stage::Phase2 { iteration } => phase2(&session, state, iteration, &lane),
                Stage::Phase3 { iteration } => phase3(&session, state, iteration, &lane),
                Stage::Phase4 => phase4(&session, state, &lane),
                Stage::Done => unreachable!(),
            };
            match result {
                Ok(next) => state.stage = next,
                Err(err) => {
                    if err.is_budget_exhausted() {
                        state.budget_exhausted = true;
                    } else {
                        session.event(&lane, EventKind::StageFailed, json!({ "error": err.to_string() }));
                    }
                    state.stage = Stage::Done;
                }
            }
            if state.budget_exhausted && state.stage == Stage::Done {
                session.event(&lane, EventKind::BudgetExhausted, json!({ "consumed": self.gateway.consumed() }));
            }
        }
        if state.verified.is_some() || state.final_solution.is_none() {
            state.final_solution = state.best_so_far().cloned();
        }
        let fin = state.final_solution.as_ref();
        session.event(
            &Lane::new(0, run_lane),
            EventKind::RunEnd,
            json!({
                "solution": fin.map(|s| &s.id),
                "score": fin.and_then(|s| s.score()).map(|s| s.value()),
                "verified": state.verified.is_some(),
                "budget_exhausted": state.budget_exhausted,
                "lemmas": state.lemma_memory.len(),
            }),
        );
        Ok(())
    }
}

fn status_of(solution: Option<&CandidateSolution>, runs: &[RunState]) -> Status {
    let verified = solution.is_some_and(|s| runs.iter().any(|r| r.verified.as_ref().is_some_and(|v| v.id == s.id)));
    if verified {
        Status::Verified
    } else if runs.iter().any(|r| r.budget_exhausted) {
        Status::BudgetExhausted
    } else {
        Status::BestEffort
    }
}

fn stage_lane(stage: &Stage) -> (u8, String) {
    match stage {
        Stage::Phase1 { iteration } => (1, format!("p1.i{iteration}")),
        Stage::Phase2 { iteration } => (2, format!("p2.i{iteration}")),
        Stage::Phase3 { iteration } => (3, format!("p3.i{iteration}")),
        Stage::Phase4 => (4, "p4".into()),
        Stage::Done => (0, "done".into()),
    }
}

fn lemma_materials(state: &RunState) -> String {
    join_materials([
        state.problem.additional_materials.as_deref().unwrap_or(""),
        &SolveContext::empty().with_lemmas(&state.lemma_memory).render_lemmas(),
    ])
}

/// Adds a batch to the run and reports whether the budget ran out while
/// producing it.
fn absorb(state: &mut RunState, outcome: &SolveOutcome, into_base: bool) -> bool {
    let target = if into_base { &mut state.base } else { &mut state.solution_memory };
    target.extend(outcome.solutions.iter().cloned());
    if let Ok(b) = best(&outcome.solutions) {
        state.history.push(b.clone());
    }
    if outcome.budget_exhausted() {
        state.budget_exhausted = true;
    }
    state.budget_exhausted
}

/// Runs the perfect-grade gate on the best of `batch`. A grade that cannot
/// be parsed counts as a failed check.
fn verify_best(
    session: &Session<'_>,
    state: &mut RunState,
    batch: &[CandidateSolution],
    lane: &Lane,
) -> Result<bool> {
    let Ok(candidate) = best(batch) else {
        return Ok(false);
    };
    let materials = lemma_materials(state);
    match verified_success(session, &state.problem, candidate, state.config.verify_repeats, &materials, &lane.child("verify")) {
        Ok(v) if v.passed => {
            state.verified = Some(candidate.clone());
            Ok(true)
        }
        Ok(_) => Ok(false),
        Err(Error::GradeParse(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn phase1(session: &Session<'_>, state: &mut RunState, iteration: u32, lane: &Lane) -> Result<Stage> {
    let k = state.config.k as usize;
    let mut specs = vec![BranchSpec {
        context: SolveContext::empty(),
        origin: Origin::Fresh,
    }];
    for j in 1..k {
        let context = select_kth_top(&state.base, j);
        let origin = if context.is_empty() { Origin::Fresh } else { Origin::Contextual };
        specs.push(BranchSpec { context, origin });
    }
    let outcome = solve_branches(session, &state.problem, &specs, lane, None);
    state.counters.phase1_iter = iteration;
    let exhausted = absorb(state, &outcome, true);
    let done_phase1 = |state: &mut RunState| {
        state.solution_memory.extend(state.base.iter().cloned());
    };
    if exhausted {
        done_phase1(state);
        return Ok(Stage::Done);
    }
    if verify_best(session, state, &outcome.solutions, lane)? {
        done_phase1(state);
        return Ok(Stage::Done);
    }
    if iteration < state.config.l0 {
        return Ok(Stage::Phase1 { iteration: iteration + 1 });
    }
    done_phase1(state);
    Ok(if state.config.l > 0 { Stage::Phase2 { iteration: 1 } } else { Stage::Phase4 })
}

fn record_pairs(session: &Session<'_>, state: &mut RunState, verified: PairVerification, lane: &Lane) {
    for lemma in &verified.proven {
        if !state.lemma_memory.iter().any(|l| l.statement == lemma.statement) {
            session.event(
                lane,
                EventKind::LemmaAdded,
                json!({ "pair": lemma.pair_id, "polarity": lemma.polarity, "statement": lemma.statement }),
            );
        }
    }
    state.add_lemmas(verified.proven);
    state.add_failures(verified.failed);
    if verified.budget_exhausted {
        state.budget_exhausted = true;
    }
}

fn phase2(session: &Session<'_>, state: &mut RunState, iteration: u32, lane: &Lane) -> Result<Stage> {
    state.counters.conjecture_iter = iteration;
    let seeds = select_top(&state.solution_memory, state.config.seed_count as usize);
    let extraction = extract_hypotheses(
        session,
        &state.problem,
        &seeds,
        &state.lemma_memory,
        &state.failure_context,
        "",
        lane,
    );
    match extraction {
        Ok(found) => {
            let verified = verify_hypotheses(session, &found.pairs, state.config.tau, lane);
            record_pairs(session, state, verified, lane);
            if state.budget_exhausted {
                return Ok(Stage::Done);
            }
        }
        Err(e) if e.is_budget_exhausted() => return Err(e),
        Err(e) => {
            session.event(lane, EventKind::ExtractionFailed, json!({ "error": e.to_string() }));
        }
    }
    Ok(Stage::Phase3 { iteration })
}

fn partial_progress(state: &RunState) -> Vec<String> {
    let cap = state.config.memory_prompt_cap;
    let items: Vec<String> = state
        .failure_context
        .iter()
        .filter_map(|f| f.partial_progress.clone())
        .collect();
    items[items.len().saturating_sub(cap)..].to_vec()
}

fn guided_context(state: &RunState, anchor: Option<&CandidateSolution>, extra: &[crate::types::FailedPair]) -> SolveContext {
    let mut context = SolveContext::empty().with_lemmas(&state.lemma_memory);
    if let Some(c) = anchor {
        context = context.with_solution(c);
    }
    context.partial_progress = partial_progress(state);
    context
        .partial_progress
        .extend(extra.iter().filter_map(|f| f.partial_progress.clone()));
    context
}

fn phase3(session: &Session<'_>, state: &mut RunState, iteration: u32, lane: &Lane) -> Result<Stage> {
    let k = state.config.k as usize;
    let anchor = best(&state.solution_memory).ok().cloned();
    let context = guided_context(state, anchor.as_ref(), &[]);
    let mut specs = vec![
        BranchSpec {
            context,
            origin: Origin::Guided,
        };
        k - 1
    ];
    specs.push(BranchSpec {
        context: SolveContext::empty(),
        origin: Origin::Fresh,
    });
    let outcome = solve_branches(session, &state.problem, &specs, lane, None);
    if absorb(state, &outcome, false) {
        return Ok(Stage::Done);
    }
    if verify_best(session, state, &outcome.solutions, lane)? {
        return Ok(Stage::Done);
    }
    Ok(if iteration < state.config.l {
        Stage::Phase2 { iteration: iteration + 1 }
    } else {
        Stage::Phase4
    })
}

fn mean(grades: &[GradeReport]) -> f64 {
    if grades.is_empty() {
        return 0.0;
    }
    grades.iter().map(|g| g.score().value() as f64).sum::<f64>() / grades.len() as f64
}

fn render_reports(grades: &[GradeReport]) -> String {
    let mut out = format!("{GRADING_REPORTS}\n");
    for (i, g) in grades.iter().enumerate() {
        let _ = write!(out, "\n### Report {} (score {})\n{}\n", i + 1, g.score(), g.transcript().trim());
    }
    out
}

fn phase4(session: &Session<'_>, state: &mut RunState, lane: &Lane) -> Result<Stage> {
    let Some(incumbent) = best(&state.solution_memory).ok().cloned() else {
        return Ok(Stage::Done);
    };
    let n = state.config.verify_repeats;
    let materials = lemma_materials(state);
    let check = grade_independent(session, &state.problem, &incumbent, n, &materials, &lane.child("check"))?;
    let check_mean = mean(&check);
    if check.iter().all(GradeReport::is_perfect) {
        session.event(lane, EventKind::PostEnhance, json!({ "step": "check", "mean": check_mean, "all_perfect": true }));
        state.verified = Some(incumbent);
        return Ok(Stage::Done);
    }

    let reports = render_reports(&check);
    let sessions = fan_out(state.config.concurrency, 2, |j| {
        let sub = lane.child(format!("s{j}"));
        let found = extract_hypotheses(
            session,
            &state.problem,
            std::slice::from_ref(&incumbent),
            &state.lemma_memory,
            &state.failure_context,
            &reports,
            &sub,
        )?;
        Ok::<_, Error>(verify_hypotheses(session, &found.pairs, state.config.tau_e, &sub))
    });
    let mut fix_failures = Vec::new();
    for result in sessions {
        match result {
            Ok(verified) => {
                fix_failures.extend(verified.failed.iter().cloned());
                record_pairs(session, state, verified, lane);
            }
            Err(e) if e.is_budget_exhausted() => state.budget_exhausted = true,
            Err(e) => session.event(lane, EventKind::ExtractionFailed, json!({ "error": e.to_string() })),
        }
    }
    if state.budget_exhausted {
        return Ok(Stage::Done);
    }

    let context = guided_context(state, Some(&incumbent), &fix_failures);
    let specs = vec![
        BranchSpec {
            context,
            origin: Origin::PostEnhanced,
        };
        state.config.k as usize
    ];
    let solve_lane = lane.child("solve");
    let outcome = solve_branches(session, &state.problem, &specs, &solve_lane, None);
    let batch = outcome.solutions.clone();
    if absorb(state, &outcome, false) {
        return Ok(Stage::Done);
    }
    let Ok(better) = best(&batch).cloned() else {
        return Ok(Stage::Done);
    };
    let materials = lemma_materials(state);
    let graded = grade_independent(session, &state.problem, &better, n, &materials, &lane.child("better"))?;
    let better_mean = mean(&graded);
    let pick_better = better_mean > check_mean;
    session.event(
        lane,
        EventKind::PostEnhance,
        json!({
            "incumbent": incumbent.id,
            "check_mean": check_mean,
            "better": better.id,
            "better_mean": better_mean,
            "winner": if pick_better { &better.id } else { &incumbent.id },
        }),
    );
    let winner = if pick_better { better } else { incumbent };
    state.history.push(winner.clone());
    state.final_solution = Some(winner);
    Ok(Stage::Done)
}
