//! Acceptance checks, one per criterion. Prints a PASS/FAIL line for each
//! and exits non-zero if any fail.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proofloop::conjecture::{classify, parse_conjectures, ParseError, Verdict};
use proofloop::dialectic::verified_success;
use proofloop::gateway::ledger::{cost_of, estimate_max_budget, CostLedger, Price, PriceTable};
use proofloop::gateway::scripted::{Exhausted, Reply, Rule, Script, ScriptedBackend};
use proofloop::gateway::{Gateway, ModelRole, Usage};
use proofloop::metrics::{bucketize, compute_metrics, read_records, Rate};
use proofloop::orchestrator::checkpoint::{self, Checkpoint};
use proofloop::orchestrator::{parse_decision, Engine, Outcome, Status, Winner};
use proofloop::prompts::Registry;
use proofloop::scenarios::{self, demo_prices, grader_reply, Scenario};
use proofloop::session::{Lane, Session};
use proofloop::trace::{first_divergence, EventKind, Trace, TraceEvent};
use proofloop::types::{digest, CandidateSolution, Origin, PipelineConfig, Problem};
use rand::{rngs::StdRng, Rng, SeedableRng};
use regex::Regex;
use rust_decimal::Decimal;

fn config(l0: u32, l: u32, k: u32, runs: u32) -> PipelineConfig {
    PipelineConfig {
        l0,
        l,
        k,
        parallel_runs: runs,
        ..PipelineConfig::pb_adv()
    }
}

fn run(scenario: &Scenario, cfg: &PipelineConfig) -> (Outcome, Vec<TraceEvent>, Gateway) {
    let gateway = scenario.gateway(cfg.token_budget);
    let registry = Registry::builtin();
    let trace = Trace::in_memory();
    let outcome = Engine::new(&gateway, &registry, &trace)
        .solve(&scenario.problem, cfg)
        .expect("scripted runs complete");
    (outcome, trace.events(), gateway)
}

fn reply(text: impl Into<String>) -> Reply {
    Reply::text(text).usage(100, 50)
}

// ---------------------------------------------------------------- 1

fn truth_table() {
    let start = Instant::now();
    let tau = 7;
    for g_pos in 0..=7u8 {
        for g_neg in 0..=7u8 {
            // Exactly one side at the threshold settles the pair.
            let expected = if g_pos >= tau && g_neg < tau {
                Verdict::Positive
            } else if g_neg >= tau && g_pos < tau {
                Verdict::Negative
            } else {
                Verdict::Ambiguous
            };
            let got = classify(g_pos, g_neg, tau);
            assert_eq!(got, expected, "({g_pos}, {g_neg})");
            if g_pos == 7 && g_neg == 7 {
                assert_eq!(got, Verdict::Ambiguous, "both sides proven must not yield a lemma");
            }
        }
    }
    assert!(start.elapsed() < Duration::from_secs(1));
}

// ---------------------------------------------------------------- 2

/// The processor flags every other draft, forcing a redraft.
fn censored() -> Scenario {
    let mut s = scenarios::instant_success();
    s.script.rules.retain(|r| r.role != Some(ModelRole::Processor));
    s.script = s.script.rule(
        Rule::role(ModelRole::Processor)
            .replies([reply("- \"clearly\" hides the key inequality."), reply("NO_ISSUES")])
            .on_exhausted(Exhausted::Cycle),
    );
    s
}

/// Grades cycle through 5, 7 and 6 from call to call.
fn wobbly() -> Scenario {
    let mut s = scenarios::plateau(5);
    s.script.rules.retain(|r| r.role != Some(ModelRole::Grader));
    s.script = s.script.rule(
        Rule::role(ModelRole::Grader)
            .replies([
                reply(grader_reply(5, &[("Slip", "A constant is off by one.")])),
                reply(grader_reply(7, &[])),
                reply(grader_reply(6, &[("Slip", "The base case is skipped.")])),
            ])
            .on_exhausted(Exhausted::Cycle),
    );
    s
}

const STEPS: [&str; 6] = ["draft", "censor", "redraft", "grade", "refine", "regrade"];

fn branch_call_shape() {
    let mut cases: Vec<(&str, Scenario, PipelineConfig)> = vec![
        ("instant", scenarios::instant_success(), config(1, 1, 3, 1)),
        ("well", scenarios::cognitive_well(), config(1, 3, 4, 1)),
        ("well-ablated", scenarios::cognitive_well(), config(1, 0, 4, 1)),
        ("well-two-runs", scenarios::cognitive_well(), config(2, 1, 3, 2)),
        ("censored", censored(), config(1, 1, 4, 1)),
        ("wobbly", wobbly(), config(2, 1, 3, 1)),
    ];
    for score in 0..=6 {
        cases.push(("plateau", scenarios::plateau(score), config(1, 1, 2, 1)));
    }
    assert!(cases.len() >= 10);

    let shape = Regex::new(r"^solver:draft processor:censor (solver:redraft )?grader:grade solver:refine grader:regrade$").unwrap();
    let mut redrafts = 0;
    for (name, scenario, cfg) in &cases {
        let (_, events, _) = run(scenario, cfg);
        let mut branches: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == EventKind::ModelCall) {
            let Some((branch, step)) = e.lane.rsplit_once('/') else { continue };
            if STEPS.contains(&step) {
                let role = e.payload["role"].as_str().unwrap();
                branches.entry(branch.to_string()).or_default().push(format!("{role}:{step}"));
            }
        }
        let done = events.iter().filter(|e| e.kind == EventKind::BranchDone).count();
        assert!(!branches.is_empty(), "{name}: no branches");
        assert_eq!(branches.len(), done, "{name}: every branch completes");
        for (branch, calls) in &branches {
            let line = calls.join(" ");
            assert!(shape.is_match(&line), "{name} {branch}: {line}");
            redrafts += usize::from(line.contains("redraft"));
        }
    }
    assert!(redrafts > 0, "the redraft path was never exercised");
}

// ---------------------------------------------------------------- 3

#[derive(Clone, Copy, PartialEq, Debug)]
enum G {
    Perfect,
    Six,
    Slip,
}

fn grade_text(g: G) -> String {
    match g {
        G::Perfect => grader_reply(7, &[]),
        G::Six => grader_reply(6, &[]),
        G::Slip => grader_reply(7, &[("Slip", "A sign is dropped in the last line.")]),
    }
}

fn gate_with(grades: [G; 3]) -> (bool, Vec<TraceEvent>) {
    let script = Script::new().rule(
        Rule::role(ModelRole::Grader)
            .replies(grades.iter().map(|g| reply(grade_text(*g))))
            .on_exhausted(Exhausted::Fail),
    );
    let gateway = Gateway::builder(demo_prices(), 1_000_000)
        .backend("scripted", Arc::new(ScriptedBackend::new(script)))
        .default_backend("scripted")
        .build()
        .unwrap();
    let registry = Registry::builtin();
    let cfg = PipelineConfig::pb_adv();
    let trace = Trace::in_memory();
    let session = Session {
        gateway: &gateway,
        registry: &registry,
        config: &cfg,
        trace: &trace,
        run: Some(0),
    };
    let problem = Problem::new("gate", "Show that 2 + 2 = 4.").unwrap();
    let candidate = CandidateSolution {
        id: "c".into(),
        problem_id: "gate".into(),
        proof_text: "GATE-PROOF: add two twice.".into(),
        origin: Origin::Fresh,
        phase: 1,
        grade: None,
        context_digest: digest(""),
        cost: Default::default(),
    };
    let v = verified_success(&session, &problem, &candidate, 3, "", &Lane::new(1, "gate")).unwrap();
    (v.passed, trace.events())
}

fn verified_gate() {
    let kinds = [G::Perfect, G::Six, G::Slip];
    for a in kinds {
        for b in kinds {
            for c in kinds {
                let grades = [a, b, c];
                let (passed, events) = gate_with(grades);
                let first_bad = grades.iter().position(|g| *g != G::Perfect);
                assert_eq!(passed, first_bad.is_none(), "{grades:?}");
                let calls: Vec<&TraceEvent> = events.iter().filter(|e| e.kind == EventKind::ModelCall).collect();
                assert_eq!(calls.len(), first_bad.map_or(3, |i| i + 1), "{grades:?}");
                for call in calls {
                    assert!(call.payload["prompt"].as_str().unwrap().contains("GATE-PROOF: add two twice."));
                }
            }
        }
    }

    // Inside the pipeline: one bad grade at Phase 1's verification blocks
    // acceptance there.
    let cfg = config(1, 1, 2, 1);
    let (outcome, events, _) = run(&scenarios::instant_success(), &cfg);
    assert_eq!(outcome.status, Status::Verified);
    assert!(outcome.solution.as_ref().unwrap().id.starts_with("r0-p1"));
    let verify_lanes: Vec<&str> = events.iter().filter(|e| e.kind == EventKind::Verify).map(|e| e.lane.as_str()).collect();
    assert_eq!(verify_lanes, ["r0/p1.i1/verify/v0", "r0/p1.i1/verify/v1", "r0/p1.i1/verify/v2"]);
    for position in 0..3 {
        for bad in [G::Six, G::Slip] {
            let mut s = scenarios::instant_success();
            let mutated = Rule::role(ModelRole::Grader)
                .lane(format!("r0/p1.i1/verify/v{position}"))
                .reply(reply(grade_text(bad)));
            s.script.rules.insert(0, mutated);
            let (outcome, _, _) = run(&s, &cfg);
            let accepted_in_p1 = outcome.solution.as_ref().is_some_and(|c| c.id.starts_with("r0-p1"))
                && outcome.status == Status::Verified;
            assert!(!accepted_in_p1, "{bad:?} at position {} still accepted", position + 1);
        }
    }
}

// ---------------------------------------------------------------- 4

fn cognitive_well() {
    let start = Instant::now();
    let well = scenarios::cognitive_well();
    let (full, _, _) = run(&well, &config(1, 3, 4, 1));
    assert_eq!(full.status, Status::Verified);
    let (ablated, _, _) = run(&well, &config(1, 0, 4, 1));
    assert_eq!(ablated.status, Status::BestEffort);
    let score = ablated.solution.as_ref().and_then(|c| c.score()).map(|s| s.value());
    assert_eq!(score, Some(6));
    assert!(start.elapsed() < Duration::from_secs(10), "took {:?}", start.elapsed());
}

// ---------------------------------------------------------------- 5

fn cost_arithmetic() {
    let usd = estimate_max_budget(32_000, 2, 30, 100, Decimal::from(10)).unwrap();
    assert_eq!(usd.amount(), Decimal::from(1920));

    let mut rng = StdRng::seed_from_u64(0x1ed6e5);
    let backends = ["alpha", "beta", "gamma"];
    // Prices in cents per million tokens.
    let cents: Vec<(i64, i64)> = backends
        .iter()
        .map(|_| (rng.gen_range(1..5_000), rng.gen_range(1..20_000)))
        .collect();
    let mut prices = PriceTable::new();
    for (b, (i, o)) in backends.iter().zip(&cents) {
        prices.insert(*b, Price::new(Decimal::new(*i, 2), Decimal::new(*o, 2)).unwrap());
    }
    let mut ledger = CostLedger::new(prices.clone());
    // Exact total in units of 1e-8 USD: tokens * cents / (100 * 1e6).
    let mut oracle: i128 = 0;
    for _ in 0..1000 {
        let b = rng.gen_range(0..backends.len());
        let usage = Usage {
            input_tokens: rng.gen_range(0..200_000),
            output_tokens: rng.gen_range(0..40_000),
            thinking_tokens: rng.gen_range(0..40_000),
        };
        let role = ModelRole::ALL[rng.gen_range(0..ModelRole::ALL.len())];
        let run_id = format!("r{}", rng.gen_range(0..4));
        let price = prices.get(backends[b]).unwrap();
        ledger.append(&run_id, role, backends[b], usage, cost_of(&usage, price));
        oracle += usage.input_tokens as i128 * cents[b].0 as i128
            + (usage.output_tokens + usage.thinking_tokens) as i128 * cents[b].1 as i128;
    }
    let expected = Decimal::from_i128_with_scale(oracle, 8);
    assert_eq!(ledger.total().amount(), expected);
    let by_run: Decimal = ledger.by_run().values().map(|u| u.amount()).sum();
    let by_role: Decimal = ledger.by_role().values().map(|u| u.amount()).sum();
    assert_eq!(by_run, expected);
    assert_eq!(by_role, expected);
    assert_eq!(ledger.reprice(None).unwrap().total().amount(), expected);
}

// ---------------------------------------------------------------- 6

fn metrics_oracle() {
    // Worked out by hand over the fixture records.
    let oracle_confusion = [[1, 1, 1, 0], [1, 3, 1, 1], [0, 2, 3, 2], [0, 1, 2, 1]];
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for name in ["grader_records.csv", "grader_records.jsonl"] {
        let records = read_records(&fixtures.join(name)).unwrap();
        let r = compute_metrics(&records).unwrap();
        assert_eq!(r.n, 20);
        assert_eq!(r.acc, Rate { num: 8, den: 20 });
        assert_eq!(r.mae, Rate { num: 43, den: 140 });
        assert_eq!(r.fpr, Rate { num: 6, den: 13 });
        assert_eq!(r.fnr, Rate { num: 2, den: 7 });
        assert_eq!(r.confusion, oracle_confusion);
    }
    let mapping = [0, 1, 1, 1, 6, 6, 6, 7];
    for (score, label) in mapping.into_iter().enumerate() {
        assert_eq!(bucketize(score as u8).unwrap(), label, "score {score}");
    }
}

// ---------------------------------------------------------------- 7

fn parser_robustness() {
    let well_formed = r#"{"conjectures": ["f is injective"], "negations": ["f is not injective"], "proof": "If f is injective then ..."}"#;
    let fenced = format!("```json\n{well_formed}\n```");
    let prose = format!("Sure. Here is the analysis.\n\n{well_formed}\n\nThese are the only gaps.");
    let mismatched = r#"{"conjectures": ["a", "b"], "negations": ["not a"], "proof": "p"}"#;
    let empty_arrays = r#"{"conjectures": [], "negations": [], "proof": ""}"#;

    for raw in [well_formed, fenced.as_str(), prose.as_str()] {
        let p = parse_conjectures(raw).unwrap();
        assert_eq!(p.conjectures, ["f is injective"]);
        assert_eq!(p.negations, ["f is not injective"]);
    }
    assert!(matches!(parse_conjectures(mismatched), Err(ParseError::Schema(_))));
    assert!(parse_conjectures(empty_arrays).unwrap().is_empty());
    assert!(matches!(parse_conjectures(""), Err(ParseError::Malformed(_))));
    assert!(matches!(parse_conjectures("   \n "), Err(ParseError::Malformed(_))));
    assert!(matches!(parse_conjectures("```json\n```"), Err(ParseError::Malformed(_))));

    let judge_corpus: [(&str, Option<Winner>); 10] = [
        ("<decision>A</decision>", Some(Winner::A)),
        ("<decision>B</decision>", Some(Winner::B)),
        ("**Justification:** B is cleaner.\n<decision> b </decision>", Some(Winner::B)),
        ("First I lean <decision>A</decision>, but on reflection <decision>B</decision>", Some(Winner::B)),
        ("<decision>B</decision> ... final answer: <decision>A</decision>", Some(Winner::A)),
        ("<DECISION>a</DECISION>", Some(Winner::A)),
        ("<decision>\nB\n</decision>\n", Some(Winner::B)),
        ("I prefer solution A.", None),
        ("<decision>C</decision>", None),
        ("", None),
    ];
    for (text, expected) in judge_corpus {
        assert_eq!(parse_decision(text), expected, "{text:?}");
    }
}

// ---------------------------------------------------------------- 8

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
        let out = tempfile::tempdir().unwrap();
        let resumed = Engine::new(&gateway2, &registry, &trace2)
            .with_checkpoints(out.path())
            .resume(cp)
            .unwrap();
        let text = |o: &Outcome| o.solution.as_ref().map(|c| c.proof_text.clone());
        assert_eq!(text(&resumed), text(&outcome), "solution after resuming at {id}");
        assert_eq!(resumed.status, outcome.status);
        if id != "final" {
            assert_eq!(gateway2.ledger(), gateway.ledger(), "ledger after resuming at {id}");
            assert_eq!(first_divergence(&trace2.events(), &events), None, "trace after resuming at {id}");
        }
    }
    ids.len()
}

fn replay_determinism() {
    assert!(resume_everywhere(&scenarios::cognitive_well(), &config(2, 2, 3, 2)) >= 5);
    resume_everywhere(&scenarios::cognitive_well(), &config(1, 0, 3, 1));
    resume_everywhere(&scenarios::plateau(4), &config(1, 2, 2, 1));
    resume_everywhere(&wobbly(), &config(2, 1, 3, 2));
    resume_everywhere(&scenarios::instant_success(), &config(1, 1, 2, 1));
}

// ---------------------------------------------------------------- 9

fn budget_safety() {
    let mut rng = StdRng::seed_from_u64(9);
    let cfg = config(1, 1, 3, 2);
    let slack = ModelRole::ALL.iter().map(|r| cfg.role(*r).max_output_tokens).max().unwrap();
    let (mut exhausted, mut partial) = (0, 0);
    for _ in 0..30 {
        let budget = rng.gen_range(1..40_000u64);
        let scenario = if rng.gen_bool(0.5) { scenarios::cognitive_well() } else { scenarios::plateau(3) };
        let cfg = PipelineConfig { token_budget: budget, ..cfg.clone() };
        let (outcome, events, gateway) = run(&scenario, &cfg);
        assert!(gateway.consumed() <= budget + slack, "budget {budget}: consumed {}", gateway.consumed());
        if outcome.status == Status::BudgetExhausted {
            assert!(events.iter().any(|e| e.kind == EventKind::BudgetExhausted));
            exhausted += 1;
            partial += usize::from(outcome.solution.is_some());
        }
        if events.iter().any(|e| e.kind == EventKind::BranchDone) {
            assert!(outcome.solution.is_some(), "budget {budget}: completed work was dropped");
        }
    }
    assert!(exhausted >= 10 && partial >= 3, "exhausted {exhausted}, with partial output {partial}");
}

fn main() {
    let criteria: [(&str, fn()); 9] = [
        ("bisection truth table", truth_table),
        ("branch call shape", branch_call_shape),
        ("verified-success gate", verified_gate),
        ("cognitive well", cognitive_well),
        ("cost arithmetic", cost_arithmetic),
        ("metrics oracle", metrics_oracle),
        ("parser robustness", parser_robustness),
        ("replay determinism", replay_determinism),
        ("budget safety", budget_safety),
    ];
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        match result {
            Ok(()) => println!("PASS criterion {}: {name}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {}: {name}: {msg}", i + 1);
            }
        }
    }
    panic::set_hook(default_hook);
    if failed > 0 {
        std::process::exit(1);
    }
}
