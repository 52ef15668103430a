use std::path::{Path, PathBuf};
use std::str::FromStr;

use proofloop::gateway::ledger::{estimate_max_budget, CostLedger, PriceTable};
use proofloop::gateway::{Gateway, ModelRole, RetryPolicy, Usage};
use proofloop::metrics::{compute_metrics, confusion_csv, read_records};
use proofloop::orchestrator::checkpoint::{self, Checkpoint};
use proofloop::orchestrator::{Engine, Outcome};
use proofloop::prompts::Registry;
use proofloop::trace::{first_divergence, read_trace, EventKind, Trace, TraceEvent, TraceHeader, SCHEMA_VERSION};
use proofloop::types::{Concurrency, PipelineConfig, Problem};
use rust_decimal::Decimal;
use serde::Deserialize;
use serde_json::json;

use crate::config::{self, BuiltBackend, CliConfig};
use crate::{CliError, CostArgs, MetricsArgs, PipelineFlags, ReplayArgs, ResumeArgs, SolveArgs};

const REPLAY_DIVERGED: u8 = 12;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Writes through a temporary file in the same directory.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(runtime)?;
    std::io::Write::write_all(&mut tmp, contents.as_bytes()).map_err(runtime)?;
    tmp.persist(path).map_err(runtime)?;
    Ok(())
}

fn apply_flags(config: &mut PipelineConfig, flags: &PipelineFlags) -> Result<(), CliError> {
    let set = |slot: &mut u32, v: Option<u32>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut config.l0, flags.l0);
    set(&mut config.l, flags.l);
    set(&mut config.k, flags.k);
    set(&mut config.parallel_runs, flags.parallel_runs);
    set(&mut config.extraction_budget, flags.extraction_budget);
    if let Some(v) = flags.tau {
        config.tau = v;
    }
    if let Some(v) = flags.tau_e {
        config.tau_e = v;
    }
    if let Some(v) = flags.token_budget {
        config.token_budget = v;
    }
    config.strict_budget |= flags.strict_budget;
    if flags.threads {
        config.concurrency = Concurrency::Threads;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if config.token_budget == 0 {
        return Err(CliError::Usage("token budget must be positive".into()));
    }
    Ok(())
}

fn retry(retries: Option<u32>) -> u32 {
    retries.unwrap_or(RetryPolicy::default().attempts)
}

#[derive(Deserialize)]
struct Setup {
    problem: Problem,
    config: PipelineConfig,
    backend: serde_json::Value,
    prices: PriceTable,
    checkpoints: bool,
    #[serde(default)]
    retries: Option<u32>,
    #[serde(default)]
    templates: Option<PathBuf>,
}

fn registry_for(templates: Option<&Path>) -> Result<Registry, CliError> {
    match templates {
        Some(dir) => Registry::builtin()
            .with_overrides_from(dir)
            .map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(Registry::builtin()),
    }
}

fn write_artifacts(dir: &Path, outcome: &Outcome, gateway: &Gateway) -> Result<(), CliError> {
    let solution = match &outcome.solution {
        Some(s) => format!("{}\n", s.proof_text.trim_end()),
        None => "(no solution was produced)\n".to_string(),
    };
    write_atomic(&dir.join("solution.md"), &solution)?;
    let ledger = gateway.ledger();
    let runs: Vec<_> = outcome
        .runs
        .iter()
        .map(|r| {
            json!({
                "run": r.run,
                "final": r.final_solution.as_ref().map(|s| &s.id),
                "score": r.final_solution.as_ref().and_then(|s| s.score()).map(|s| s.value()),
                "verified": r.verified.is_some(),
                "budget_exhausted": r.budget_exhausted,
                "lemmas": r.lemma_memory.len(),
            })
        })
        .collect();
    let summary = json!({
        "status": outcome.status,
        "exit_code": outcome.status.exit_code(),
        "solution": outcome.solution,
        "runs": runs,
        "judge": outcome.judge,
        "usd": ledger.total(),
        "tokens": gateway.consumed(),
    });
    write_atomic(&dir.join("outcome.json"), &serde_json::to_string_pretty(&summary).map_err(runtime)?)?;
    write_atomic(&dir.join("ledger.json"), &serde_json::to_string_pretty(&ledger).map_err(runtime)?)?;
    write_atomic(&dir.join("cost.txt"), &ledger.report().to_table("Pipeline"))?;
    write_atomic(&dir.join("ledger.csv"), &ledger.to_csv().map_err(runtime)?)?;
    Ok(())
}

fn report(dir: &Path, outcome: &Outcome, gateway: &Gateway) -> u8 {
    let score = outcome
        .solution
        .as_ref()
        .and_then(|s| s.score())
        .map(|s| s.to_string())
        .unwrap_or_else(|| "-".into());
    println!(
        "{:?}: score {score}, {} tokens, {} (artifacts in {})",
        outcome.status,
        gateway.consumed(),
        gateway.ledger().total(),
        dir.display()
    );
    outcome.status.exit_code() as u8
}

pub fn solve(args: SolveArgs) -> Result<u8, CliError> {
    let cli_config = match &args.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let problem = config::load_problem(&args.problem)?;
    let mut pipeline = cli_config.pipeline.clone();
    apply_flags(&mut pipeline, &args.pipeline)?;
    let built: BuiltBackend = match (&args.script, &cli_config.backend) {
        (Some(script), _) => config::scripted(config::load_script(script)?, cli_config.prices.clone()),
        (None, Some(spec)) => config::build_backend(spec, cli_config.prices.clone())?,
        (None, None) => return Err(CliError::Usage("no backend: pass --script or a --config with [backend]".into())),
    };
    let retries = retry(cli_config.retries);
    let gateway = config::gateway(&built, &pipeline, retries)?;
    let registry = cli_config.registry()?;
    let out = args
        .out
        .clone()
        .or(cli_config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("proofloop-out"));
    std::fs::create_dir_all(&out).map_err(runtime)?;

    let checkpoints = pipeline.concurrency == Concurrency::Sequential;
    let header = TraceHeader {
        schema_version: SCHEMA_VERSION,
        template_version: registry.version(),
        setup: json!({
            "problem": problem,
            "config": pipeline,
            "backend": built.setup,
            "prices": built.prices,
            "checkpoints": checkpoints,
            "retries": retries,
            "templates": cli_config.templates,
        }),
    };
    let trace = Trace::to_file(&out.join("trace.jsonl"), &header, Vec::new())?;
    let mut engine = Engine::new(&gateway, &registry, &trace);
    if checkpoints {
        engine = engine.with_checkpoints(out.join("checkpoints"));
    }
    let outcome = engine.solve(&problem, &pipeline)?;
    write_artifacts(&out, &outcome, &gateway)?;
    Ok(report(&out, &outcome, &gateway))
}

pub fn resume(args: ResumeArgs) -> Result<u8, CliError> {
    let trace_path = args.dir.join("trace.jsonl");
    let cp_dir = args.dir.join("checkpoints");
    let Some(id) = args.checkpoint else {
        for (id, trace_len) in checkpoint::list(&cp_dir)? {
            println!("{id}\t(after event {trace_len})");
        }
        return Ok(0);
    };
    let (header, events) = read_trace(&trace_path).map_err(|e| CliError::Usage(e.to_string()))?;
    let setup: Setup =
        serde_json::from_value(header.setup.clone()).map_err(|e| CliError::Usage(format!("trace header: {e}")))?;
    let cp = Checkpoint::load(&Checkpoint::path_in(&cp_dir, &id))?;
    if cp.trace_len > events.len() {
        return Err(CliError::Runtime(format!(
            "checkpoint {id} follows event {} but the trace has only {}",
            cp.trace_len,
            events.len()
        )));
    }
    let built = config::backend_from_setup(&setup.backend, setup.prices.clone())?;
    let gateway = config::gateway(&built, &setup.config, retry(setup.retries))?;
    let registry = registry_for(setup.templates.as_deref())?;
    let prior = events[..cp.trace_len].to_vec();
    let trace = Trace::to_file(&trace_path, &header, prior)?;
    let engine = Engine::new(&gateway, &registry, &trace).with_checkpoints(&cp_dir);
    let outcome = engine.resume(cp)?;
    if id != "final" {
        write_artifacts(&args.dir, &outcome, &gateway)?;
    }
    Ok(report(&args.dir, &outcome, &gateway))
}

pub fn replay(args: ReplayArgs) -> Result<u8, CliError> {
    let (header, recorded) = read_trace(&args.trace).map_err(|e| CliError::Usage(e.to_string()))?;
    let setup: Setup =
        serde_json::from_value(header.setup.clone()).map_err(|e| CliError::Usage(format!("trace header: {e}")))?;
    if setup.backend["kind"] != "scripted" {
        return Err(CliError::Usage(
            "this trace was recorded against a live backend; only scripted traces can be replayed deterministically"
                .into(),
        ));
    }
    if setup.config.concurrency != Concurrency::Sequential {
        return Err(CliError::Usage("only traces recorded with sequential execution can be replayed".into()));
    }
    let built = match &args.script {
        Some(path) => config::scripted(config::load_script(path)?, Some(setup.prices.clone())),
        None => config::backend_from_setup(&setup.backend, setup.prices.clone())?,
    };
    let registry = registry_for(setup.templates.as_deref())?;
    if registry.version() != header.template_version {
        return Err(CliError::Usage(format!(
            "trace used templates {} but {} are available",
            header.template_version,
            registry.version()
        )));
    }
    let gateway = config::gateway(&built, &setup.config, retry(setup.retries))?;
    let trace = Trace::in_memory();
    let scratch = tempfile::tempdir().map_err(runtime)?;
    let mut engine = Engine::new(&gateway, &registry, &trace);
    if setup.checkpoints {
        engine = engine.with_checkpoints(scratch.path());
    }
    engine.solve(&setup.problem, &setup.config)?;
    let replayed = trace.events();
    match first_divergence(&recorded, &replayed) {
        None => {
            println!("identical ({} events)", recorded.len());
            Ok(0)
        }
        Some(i) => {
            let describe = |e: Option<&TraceEvent>| match e {
                Some(e) => format!("{:?} on {} ({})", e.kind, e.lane, e.digest),
                None => "end of trace".to_string(),
            };
            println!("diverged at event {i}");
            println!("  recorded: {}", describe(recorded.get(i)));
            println!("  replayed: {}", describe(replayed.get(i)));
            Ok(REPLAY_DIVERGED)
        }
    }
}

pub fn metrics(args: MetricsArgs) -> Result<u8, CliError> {
    let records = read_records(&args.records).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = compute_metrics(&records).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    match args.format.as_str() {
        "text" => print!("{}", report.to_text()),
        "csv" => print!("{}", report.to_csv()),
        "json" => println!("{json}"),
        other => return Err(CliError::Usage(format!("unknown format {other:?} (text, csv, json)"))),
    }
    if let Some(out) = &args.out {
        write_atomic(&out.join("metrics.txt"), &report.to_text())?;
        write_atomic(&out.join("metrics.csv"), &report.to_csv())?;
        write_atomic(&out.join("confusion.csv"), &confusion_csv(&report))?;
        write_atomic(&out.join("metrics.json"), &json)?;
    }
    Ok(0)
}

fn ledger_from_trace(path: &Path) -> Result<CostLedger, CliError> {
    let (header, events) = read_trace(path).map_err(|e| CliError::Usage(e.to_string()))?;
    let prices: PriceTable = serde_json::from_value(header.setup["prices"].clone()).unwrap_or_default();
    let mut ledger = CostLedger::new(prices);
    for e in events.iter().filter(|e| e.kind == EventKind::ModelCall && e.payload.get("usage").is_some()) {
        let parse = || -> Option<(ModelRole, Usage, String)> {
            Some((
                serde_json::from_value(e.payload["role"].clone()).ok()?,
                serde_json::from_value(e.payload["usage"].clone()).ok()?,
                e.payload["backend"].as_str()?.to_string(),
            ))
        };
        let (role, usage, backend) =
            parse().ok_or_else(|| CliError::Usage(format!("{}: malformed model_call event {}", path.display(), e.seq)))?;
        let usd = serde_json::from_value(e.payload["usd"].clone()).map_err(runtime)?;
        let run = e.run.map(|r| format!("r{r}")).unwrap_or_else(|| "judge".into());
        ledger.append(&run, role, &backend, usage, usd);
    }
    Ok(ledger)
}

pub fn cost(args: CostArgs) -> Result<u8, CliError> {
    if let Some(values) = &args.estimate {
        let int = |i: usize| {
            values[i]
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("--estimate value {:?} is not a whole number", values[i])))
        };
        let rate = Decimal::from_str(&values[4])
            .map_err(|_| CliError::Usage(format!("--estimate rate {:?} is not a decimal", values[4])))?;
        let usd = estimate_max_budget(int(0)?, int(1)?, int(2)?, int(3)?, rate).map_err(|e| CliError::Usage(e.to_string()))?;
        println!("{usd}");
        return Ok(0);
    }
    let Some(input) = &args.input else {
        return Err(CliError::Usage("pass a ledger/trace file or --estimate".into()));
    };
    let ledger = match input.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => ledger_from_trace(input)?,
        _ => {
            let text = std::fs::read_to_string(input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
            serde_json::from_str::<CostLedger>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?
        }
    };
    let prices = match &args.prices {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Some(toml::from_str::<PriceTable>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let priced = ledger.reprice(prices.as_ref()).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = priced.report();
    if args.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_table(&args.label));
    }
    Ok(0)
}
