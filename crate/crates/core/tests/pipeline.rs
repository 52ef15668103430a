use std::collections::BTreeMap;

use proofloop::gateway::ModelRole;
use proofloop::orchestrator::checkpoint::{self, Checkpoint};
use proofloop::orchestrator::{call_ceiling, Engine, Outcome, Status};
use proofloop::prompts::Registry;
use proofloop::scenarios::{self, Scenario};
use proofloop::trace::{first_divergence, EventKind, Trace, TraceEvent};
use proofloop::types::{digest, PipelineConfig, Stage};
use regex::Regex;

struct Run {
    outcome: Outcome,
    events: Vec<TraceEvent>,
    ledger: proofloop::gateway::ledger::CostLedger,
}

fn config(l0: u32, l: u32, k: u32, runs: u32) -> PipelineConfig {
    PipelineConfig {
        l0,
        l,
        k,
        parallel_runs: runs,
        ..PipelineConfig::pb_adv()
    }
}

fn run(scenario: &Scenario, config: &PipelineConfig) -> Run {
    let gateway = scenario.gateway(config.token_budget);
    let registry = Registry::builtin();
    let trace = Trace::in_memory();
    let outcome = Engine::new(&gateway, &registry, &trace).solve(&scenario.problem, config).unwrap();
    Run {
        outcome,
        events: trace.events(),
        ledger: gateway.ledger(),
    }
}

fn calls_by_role(events: &[TraceEvent]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::ModelCall) {
        *out.entry(e.payload["role"].as_str().unwrap().to_string()).or_default() += 1;
    }
    out
}

fn phase_pattern(events: &[TraceEvent], run: u32) -> String {
    events
        .iter()
        .filter(|e| e.run == Some(run) && e.kind == EventKind::PhaseStart)
        .map(|e| char::from(b'0' + e.phase))
        .collect()
}

fn check_invariants(r: &Run, config: &PipelineConfig) {
    let pattern = Regex::new(r"^1+(23)*4?$").unwrap();
    for i in 0..r.outcome.runs.len() as u32 {
        let p = phase_pattern(&r.events, i);
        assert!(pattern.is_match(&p), "run {i} phase order {p}");
    }
    let remaining: Vec<u64> = r.events.iter().map(|e| e.budget_remaining).collect();
    assert!(remaining.windows(2).all(|w| w[0] >= w[1]), "budget must not increase");

    let ceiling = call_ceiling(config);
    let calls = calls_by_role(&r.events);
    for role in ModelRole::ALL {
        let n = calls.get(role.as_str()).copied().unwrap_or(0);
        assert!(n <= ceiling.get(role), "{role:?}: {n} calls above ceiling {}", ceiling.get(role));
    }

    // Each Phase 3 iteration has exactly one solve with an empty context.
    let empty = digest("");
    let mut fresh: BTreeMap<String, usize> = BTreeMap::new();
    for e in r.events.iter().filter(|e| e.kind == EventKind::Draft && e.phase == 3) {
        let iteration = e.lane.split('/').take(2).collect::<Vec<_>>().join("/");
        let n = fresh.entry(iteration).or_default();
        if e.payload["context_digest"] == empty.as_str() {
            *n += 1;
        }
    }
    assert!(fresh.values().all(|&n| n == 1), "fresh solves per Phase 3 iteration: {fresh:?}");

    if r.outcome.status == Status::Verified {
        let solution = r.outcome.solution.as_ref().unwrap();
        let d = digest(&solution.proof_text);
        let verifies: Vec<&TraceEvent> = r.events.iter().filter(|e| e.kind == EventKind::Verify).collect();
        let n = config.verify_repeats as usize;
        let found = verifies.windows(n).any(|w| {
            w.iter().all(|e| e.payload["digest"] == d.as_str() && e.payload["score"] == 7 && e.payload["perfect"] == true)
        });
        assert!(found, "verified solution lacks {n} consecutive perfect grades");
    }
}

#[test]
fn instant_success_exits_in_phase_one() {
    let cfg = config(2, 3, 4, 1);
    let r = run(&scenarios::instant_success(), &cfg);
    assert_eq!(r.outcome.status, Status::Verified);
    assert_eq!(r.outcome.runs[0].stage, Stage::Done);
    assert_eq!(phase_pattern(&r.events, 0), "1");
    assert_eq!(calls_by_role(&r.events).get("extractor"), None);
    assert_eq!(r.outcome.solution.as_ref().unwrap().id, "r0-p1.i1-b0");
    check_invariants(&r, &cfg);
}

#[test]
fn cognitive_well_escapes_only_with_conjectures() {
    let well = scenarios::cognitive_well();
    let full = config(1, 3, 4, 1);
    let r = run(&well, &full);
    assert_eq!(r.outcome.status, Status::Verified);
    assert_eq!(phase_pattern(&r.events, 0), "123");
    let solution = r.outcome.solution.as_ref().unwrap();
    assert!(solution.proof_text.starts_with("ANSWER-ESCAPE"));
    assert_eq!(r.outcome.runs[0].lemma_memory.len(), 1);
    assert_eq!(r.outcome.runs[0].lemma_memory[0].statement, scenarios::WELL_NEGATION);
    check_invariants(&r, &full);

    let ablated = config(1, 0, 4, 1);
    let r = run(&well, &ablated);
    assert_eq!(r.outcome.status, Status::BestEffort);
    assert_eq!(phase_pattern(&r.events, 0), "14");
    let solution = r.outcome.solution.as_ref().unwrap();
    assert_eq!(solution.score().unwrap().value(), 6);
    assert!(solution.proof_text.starts_with("ANSWER-WELL"));
    // Phase 4 proved the gap lemma, which does not help.
    assert_eq!(r.outcome.runs[0].lemma_memory[0].statement, scenarios::GAP_CONJECTURE);
    check_invariants(&r, &ablated);
}

#[test]
fn plateau_ends_in_phase_four_keeping_the_incumbent_on_ties() {
    let cfg = config(1, 1, 2, 1);
    let r = run(&scenarios::plateau(2), &cfg);
    assert_eq!(r.outcome.status, Status::BestEffort);
    assert_eq!(phase_pattern(&r.events, 0), "1234");
    // Both means are 2, so the incumbent (best of memory before Phase 4) stays.
    let post = r.events.iter().find(|e| e.kind == EventKind::PostEnhance).unwrap();
    assert_eq!(post.payload["check_mean"], 2.0);
    assert_eq!(post.payload["better_mean"], 2.0);
    assert_eq!(post.payload["winner"], post.payload["incumbent"]);
    assert_eq!(r.outcome.solution.as_ref().unwrap().id, post.payload["incumbent"].as_str().unwrap());
    // The one pair grades 2 on both sides each time: ambiguous, no lemma.
    assert!(r.outcome.runs[0].lemma_memory.is_empty());
    assert_eq!(r.outcome.runs[0].failure_context.len(), 3);
    check_invariants(&r, &cfg);
}

#[test]
fn judge_picks_run_b() {
    let cfg = config(1, 1, 2, 2);
    let r = run(&scenarios::plateau(2), &cfg);
    assert_eq!(r.outcome.judge.len(), 1);
    let b_final = r.outcome.runs[1].final_solution.clone().unwrap();
    assert_eq!(r.outcome.solution.unwrap().id, b_final.id);
    assert!(b_final.id.starts_with("r1-"));
    assert_eq!(calls_by_role(&r.events)["judge"], 1);
}

#[test]
fn single_run_has_no_judge_call() {
    let r = run(&scenarios::plateau(2), &config(1, 1, 2, 1));
    assert_eq!(calls_by_role(&r.events).get("judge"), None);
    assert!(r.outcome.judge.is_empty());
}

#[test]
fn three_runs_use_a_ladder() {
    let cfg = config(1, 0, 2, 3);
    let r = run(&scenarios::plateau(2), &cfg);
    assert_eq!(r.outcome.judge.len(), 2);
    assert!(r.outcome.solution.as_ref().unwrap().id.starts_with("r2-"));
    check_invariants(&r, &cfg);
}

#[test]
fn threads_match_sequential_results() {
    let mut cfg = config(1, 1, 3, 2);
    let seq = run(&scenarios::cognitive_well(), &cfg);
    cfg.concurrency = proofloop::types::Concurrency::Threads;
    let par = run(&scenarios::cognitive_well(), &cfg);
    assert_eq!(seq.outcome.solution.unwrap().proof_text, par.outcome.solution.unwrap().proof_text);
    assert_eq!(seq.ledger.total(), par.ledger.total());
}

fn resume_everywhere(scenario: &Scenario, cfg: &PipelineConfig) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let gateway = scenario.gateway(cfg.token_budget);
    let registry = Registry::builtin();
    let trace = Trace::in_memory();
    let outcome = Engine::new(&gateway, &registry, &trace)
        .with_checkpoints(dir.path())
        .solve(&scenario.problem, cfg)
        .unwrap();
    let events = trace.events();
    let ids = checkpoint::list(dir.path()).unwrap();
    for (id, trace_len) in &ids {
        let cp = Checkpoint::load(&Checkpoint::path_in(dir.path(), id)).unwrap();
        let gateway2 = scenario.gateway(cfg.token_budget);
        let trace2 = Trace::from_events(events[..*trace_len].to_vec());
        let out_dir = tempfile::tempdir().unwrap();
        let resumed = Engine::new(&gateway2, &registry, &trace2)
            .with_checkpoints(out_dir.path())
            .resume(cp)
            .unwrap();
        assert_eq!(resumed.solution, outcome.solution, "resumed at {id}");
        assert_eq!(resumed.status, outcome.status);
        if id != "final" {
            assert_eq!(gateway2.ledger(), gateway.ledger(), "ledger after resuming at {id}");
            assert_eq!(first_divergence(&trace2.events(), &events), None, "trace after resuming at {id}");
        }
    }
    ids.len()
}

#[test]
fn resuming_at_every_checkpoint_reproduces_the_run() {
    let n = resume_everywhere(&scenarios::cognitive_well(), &config(2, 2, 3, 2));
    assert!(n >= 5);
    resume_everywhere(&scenarios::plateau(2), &config(1, 2, 2, 1));
}

#[test]
fn resume_rejects_other_template_versions() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios::instant_success();
    let cfg = config(1, 1, 2, 1);
    let gateway = scenario.gateway(cfg.token_budget);
    let registry = Registry::builtin();
    let trace = Trace::in_memory();
    Engine::new(&gateway, &registry, &trace)
        .with_checkpoints(dir.path())
        .solve(&scenario.problem, &cfg)
        .unwrap();
    let mut cp = Checkpoint::load(&Checkpoint::path_in(dir.path(), "r0-p1.i1")).unwrap();
    cp.template_version = "1999.01-v0".into();
    let trace2 = Trace::from_events(trace.events()[..cp.trace_len].to_vec());
    let err = Engine::new(&scenario.gateway(cfg.token_budget), &registry, &trace2).resume(cp).unwrap_err();
    assert!(matches!(err, proofloop::Error::Resume(_)), "{err}");

    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    assert!(matches!(
        Checkpoint::load(&dir.path().join("broken.json")),
        Err(proofloop::Error::Resume(_))
    ));
}

#[test]
fn tiny_budgets_end_gracefully() {
    let cfg = config(1, 1, 2, 2);
    for budget in [1u64, 10, 1_500, 5_000, 12_000, 30_000] {
        let scenario = scenarios::cognitive_well();
        let gateway = scenario.gateway(budget);
        let registry = Registry::builtin();
        let trace = Trace::in_memory();
        let outcome = Engine::new(&gateway, &registry, &trace)
            .solve(&scenario.problem, &PipelineConfig { token_budget: budget, ..cfg.clone() })
            .unwrap();
        let slack = cfg.role(ModelRole::Solver).max_output_tokens;
        assert!(gateway.consumed() <= budget + slack, "budget {budget}: consumed {}", gateway.consumed());
        assert_eq!(outcome.status, Status::BudgetExhausted, "budget {budget}");
        assert!(trace.events().iter().any(|e| e.kind == EventKind::BudgetExhausted));
    }
}
