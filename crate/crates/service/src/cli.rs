//! `evoflow` command line. Failures exit 1 with a one-line JSON error on
//! stderr; usage errors are clap's (exit 2).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evoflow_core::bench::{self, AgentRunner, EngineRunner, RunReport, SweepConfig, SyntheticAgent};
use evoflow_core::events::replay_file;
use evoflow_core::fixtures;
use evoflow_core::provider::ScriptMode;
use evoflow_core::session::{Directive, Gate, HumanFeedback, Session, SessionStatus};
use evoflow_core::trials::{aggregate, run_trials_with, CriticAdjudicator, TrialBudget, TrialTask};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ProviderMode, RunConfig};
use crate::runtime::Runtime;

#[derive(Debug, Parser)]
#[command(name = "evoflow", version, about = "Self-evolving multi-agent orchestration engine")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data directory (event log, templates, tools, workspaces).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Built-in scripted scenario to use as the model.
    #[arg(long, global = true)]
    pub fixture: Option<String>,
    /// Scripted transcript file (one JSON exchange per line).
    #[arg(long, global = true)]
    pub transcript: Option<PathBuf>,
    /// How scripted replies are matched to requests.
    #[arg(long, global = true, value_enum)]
    pub script_mode: Option<ModeArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Strict,
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AgentArg {
    /// Full engine sessions per item.
    Engine,
    /// Independent trials correct with probability --p.
    Synthetic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a goal to completion (N trials, aggregated).
    Run {
        /// Research goal; defaults to the fixture's goal.
        goal: Option<String>,
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        max_iterations: Option<u32>,
        /// Stop for approval after planning.
        #[arg(long)]
        post_plan_gate: bool,
        /// Stop for approval before registering a created tool.
        #[arg(long)]
        pre_tool_gate: bool,
        /// Save every model exchange to this transcript file.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a benchmark dataset.
    Bench {
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        budget: u32,
        #[arg(long)]
        seed: Option<u64>,
        /// Repetitions; seeds are seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        reps: u32,
        /// Evaluate a seeded subset of this fraction of the items.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_enum, default_value = "engine")]
        agent: AgentArg,
        #[arg(long, default_value_t = 0.6)]
        p: f64,
        /// Write the run reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Accuracy against trial budget, as CSV.
    Sweep {
        /// Dataset; without one, synthetic items are generated.
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,9")]
        budgets: Vec<u32>,
        #[arg(long, default_value_t = 3)]
        reps: u32,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "synthetic")]
        agent: AgentArg,
        #[arg(long, default_value_t = 0.6)]
        p: f64,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or validate registered tools.
    Tools {
        #[command(subcommand)]
        command: ToolsCommand,
    },
    /// Inspect the template library.
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
    /// Rebuild a session from its event log.
    Replay {
        session: String,
        /// Log file to read instead of the data dir's.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ToolsCommand {
    List,
    Validate { id: String },
}

#[derive(Debug, Subcommand)]
pub enum TemplatesCommand {
    List,
}

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::new("runtime", format!("{e:#}"))
    }
}

type CliResult = Result<(), CliError>;

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"code": e.code, "message": e.message}}));
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::new("config", e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.data_dir {
        config.data_dir = d.clone();
    }
    if let Some(f) = &cli.fixture {
        config.provider.mode = ProviderMode::Scripted;
        config.provider.fixture = f.clone();
        config.provider.transcript = None;
    }
    if let Some(t) = &cli.transcript {
        config.provider.mode = ProviderMode::Scripted;
        config.provider.transcript = Some(t.clone());
    }
    if let Some(m) = cli.script_mode {
        config.provider.script_mode = Some(match m {
            ModeArg::Strict => ScriptMode::StrictSequence,
            ModeArg::Pattern => ScriptMode::PatternMatch,
        });
    }
    Ok(config)
}

pub fn run(cli: Cli) -> CliResult {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Run { goal, budget, max_iterations, post_plan_gate, pre_tool_gate, record, json } => {
            if let Some(n) = max_iterations {
                config.session.max_iterations = n;
            }
            config.session.post_plan_gate |= post_plan_gate;
            config.session.pre_tool_registration_gate |= pre_tool_gate;
            if let Some(b) = budget {
                config.trials.budget = b;
            }
            config.validate().map_err(|e| CliError::new("config", e.to_string()))?;
            let goal = match goal {
                Some(g) => g,
                None => default_goal(&config)?,
            };
            cmd_run(config, &goal, record.as_deref(), json)
        }
        Command::Bench { dataset, budget, seed, reps, fraction, agent, p, out, json } => {
            let seed = seed.unwrap_or(config.seeds.bench);
            cmd_bench(config, &dataset, budget, seed, reps, fraction, agent, p, out.as_deref(), json)
        }
        Command::Sweep { dataset, budgets, reps, seeds, agent, p, items, out } => {
            cmd_sweep(config, dataset.as_deref(), &budgets, reps, seeds, agent, p, items, out.as_deref())
        }
        Command::Tools { command } => cmd_tools(config, command),
        Command::Templates { command: TemplatesCommand::List } => {
            let rt = Runtime::open(config)?;
            for t in rt.engine.templates().list() {
                println!("{}\t{}\tuses={}\tmetric={}", t.id, t.title, t.usage_count, t.success_metric);
            }
            Ok(())
        }
        Command::Replay { session, log, json } => cmd_replay(&config, &session, log.as_deref(), json),
        Command::Serve { addr } => {
            let rt = Runtime::open(config)?;
            let tokio = tokio::runtime::Runtime::new().map_err(|e| CliError::new("runtime", e.to_string()))?;
            tokio.block_on(crate::app::serve(rt, &addr))?;
            Ok(())
        }
    }
}

fn default_goal(config: &RunConfig) -> Result<String, CliError> {
    if config.provider.mode == ProviderMode::Scripted && config.provider.transcript.is_none() {
        match config.provider.fixture.as_str() {
            "happy_path" => return Ok(fixtures::HAPPY_GOAL.into()),
            "capability_gap" | "failing_tool_creator" => return Ok(fixtures::GAP_GOAL.into()),
            _ => {}
        }
    }
    Err(CliError::new("usage", "a goal is required for this provider"))
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Asks on stderr, reads one line from stdin. EOF leaves the gate open.
fn prompt_gate(session: &Session) -> Option<HumanFeedback> {
    let mut err = std::io::stderr();
    match &session.pending_gate {
        Some(Gate::PostPlan) => {
            let _ = writeln!(err, "gate post_plan on {}; proposed plan:", session.id);
            for s in &session.pathway.steps {
                let _ = writeln!(err, "  {} {} (depends: {})", s.id, s.description, s.depends_on.join(","));
            }
        }
        Some(Gate::PreToolRegistration { tool_id }) => {
            let _ = writeln!(err, "gate pre_tool_registration on {}: register tool {tool_id}?", session.id);
        }
        None => return None,
    }
    loop {
        let _ = write!(err, "approve | reject <reason> | comment <text>: ");
        let _ = err.flush();
        let mut line = String::new();
        if std::io::stdin().lock().read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim();
        let (word, body) = line.split_once(' ').unwrap_or((line, ""));
        let directive = match word {
            "" | "a" | "approve" => Directive::Approve,
            "r" | "reject" => Directive::Reject,
            "c" | "comment" => Directive::Comment,
            _ => continue,
        };
        return Some(HumanFeedback { author: "cli".into(), target_step: None, directive, body: body.trim().to_string() });
    }
}

fn session_json(s: &Session) -> Value {
    json!({
        "id": s.id,
        "status": s.status,
        "state_hash": s.state_hash(),
        "final_answer": s.final_answer.as_ref().map(|a| a.answer.clone()),
        "failure": s.failure,
        "iteration_count": s.iteration_count,
    })
}

fn cmd_run(config: RunConfig, goal: &str, record: Option<&Path>, as_json: bool) -> CliResult {
    let budget = TrialBudget::new(config.trials.budget).map_err(|e| CliError::new("config", e.to_string()))?;
    let rt = if record.is_some() { Runtime::open_recording(config)? } else { Runtime::open(config)? };
    let engine = &rt.engine;
    let task = TrialTask { goal: goal.to_string(), config: rt.config.session_config(), expected: None };
    let results = run_trials_with(engine, &task, budget, &mut prompt_gate).map_err(|e| CliError::new("engine", e.to_string()))?;
    rt.persist()?;
    if let Some(path) = record {
        rt.save_recording(path)?;
    }
    let sessions: Vec<Session> = results
        .iter()
        .map(|r| engine.session(&r.session_ref))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new("engine", e.to_string()))?;
    let agg = aggregate(&results, &CriticAdjudicator { engine }).map_err(|e| CliError::new("engine", e.to_string()))?;
    if as_json {
        let out = json!({
            "sessions": sessions.iter().map(session_json).collect::<Vec<_>>(),
            "trials": results,
            "aggregate": agg,
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
    } else {
        for (r, s) in results.iter().zip(&sessions) {
            println!("trial {} {} {}", r.trial_index + 1, s.id, s.status);
            match (&s.final_answer, &s.failure) {
                (Some(a), _) => println!("answer: {}", a.answer),
                (None, Some(f)) => println!("failure: {f}"),
                _ => {}
            }
            println!("state_hash: {}", s.state_hash());
        }
        if results.len() > 1 {
            println!("aggregate: {} ({})", agg.answer.as_deref().unwrap_or("<abstain>"), label(&agg.method));
        }
        println!("templates: {}  tools: {}", engine.templates().len(), engine.tools().len());
    }
    if sessions.iter().all(|s| s.status != SessionStatus::Succeeded) {
        let why = sessions.last().and_then(|s| s.failure.clone()).unwrap_or_else(|| "session did not finish".into());
        return Err(CliError::new("session_failed", why));
    }
    Ok(())
}

fn report_line(rep: u32, r: &RunReport) -> String {
    format!(
        "run {rep} seed={} budget={} items={} accuracy={} precision={} coverage={}",
        r.run_seed,
        r.budget.n_trials,
        r.total(),
        r.accuracy,
        r.precision,
        r.coverage
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: RunConfig,
    dataset: &Path,
    budget: u32,
    seed: u64,
    reps: u32,
    fraction: Option<f64>,
    agent: AgentArg,
    p: f64,
    out: Option<&Path>,
    as_json: bool,
) -> CliResult {
    let bench_err = |e: bench::BenchError| CliError::new("bench", e.to_string());
    let budget = TrialBudget::new(budget).map_err(|e| CliError::new("usage", e.to_string()))?;
    if reps == 0 {
        return Err(CliError::new("usage", "--reps must be at least 1"));
    }
    let mut items = bench::load_dataset(dataset).map_err(bench_err)?;
    if let Some(f) = fraction {
        items = bench::sample_subset(&items, f, seed).map_err(bench_err)?;
    }
    let rt = if agent == AgentArg::Engine { Some(Runtime::open(config)?) } else { None };
    let mut reports = Vec::new();
    for rep in 0..reps {
        let run_seed = seed + rep as u64;
        let mut runner: Box<dyn AgentRunner> = match &rt {
            Some(rt) => Box::new(EngineRunner { engine: rt.bench_engine()?, config: rt.config.session_config() }),
            None => Box::new(SyntheticAgent { p }),
        };
        reports.push(bench::evaluate(runner.as_mut(), &items, budget, run_seed).map_err(bench_err)?);
    }
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&reports).unwrap_or_default();
        std::fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&reports).unwrap_or_default());
        return Ok(());
    }
    for (i, r) in reports.iter().enumerate() {
        println!("{}", report_line(i as u32 + 1, r));
    }
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let mean = |f: fn(&RunReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        println!("mean accuracy={} precision={} coverage={}", mean(|r| r.accuracy), mean(|r| r.precision), mean(|r| r.coverage));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: RunConfig,
    dataset: Option<&Path>,
    budgets: &[u32],
    reps: u32,
    seeds: Vec<u64>,
    agent: AgentArg,
    p: f64,
    n_items: usize,
    out: Option<&Path>,
) -> CliResult {
    let bench_err = |e: bench::BenchError| CliError::new("bench", e.to_string());
    let items = match dataset {
        Some(d) => bench::load_dataset(d).map_err(bench_err)?,
        None => bench::synthetic_items(n_items, config.seeds.bench),
    };
    let mut sweep = SweepConfig::new(budgets, reps).map_err(bench_err)?;
    sweep.seeds = seeds;
    let rt = if agent == AgentArg::Engine { Some(Runtime::open(config)?) } else { None };
    let mut setup_error = None;
    let (table, _) = bench::sweep_budgets(
        |_, _, _| -> Box<dyn AgentRunner> {
            match &rt {
                Some(rt) => match rt.bench_engine() {
                    Ok(engine) => Box::new(EngineRunner { engine, config: rt.config.session_config() }),
                    Err(e) => {
                        setup_error = Some(e);
                        Box::new(SyntheticAgent { p: 0.0 })
                    }
                },
                None => Box::new(SyntheticAgent { p }),
            }
        },
        &items,
        &sweep,
    )
    .map_err(bench_err)?;
    if let Some(e) = setup_error {
        return Err(e.into());
    }
    let csv = table.to_csv();
    match out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    for row in table.mean_rows() {
        eprintln!("budget {:>3}: mean accuracy {:.4} (sd {:.4})", row.budget, row.accuracy, row.accuracy_stddev.unwrap_or(0.0));
    }
    Ok(())
}

fn cmd_tools(config: RunConfig, command: ToolsCommand) -> CliResult {
    let rt = Runtime::open(config)?;
    let tools = rt.engine.tools();
    match command {
        ToolsCommand::List => {
            for t in tools.list() {
                println!("{}\t{}\t{}\t{}", t.id, t.name, label(&t.category), label(&t.status));
            }
            Ok(())
        }
        ToolsCommand::Validate { id } => {
            let tool = tools.find_by_name(&id).ok_or_else(|| CliError::new("not_found", format!("no tool {id:?}")))?;
            let report = tools.validate(&tool.id).map_err(|e| CliError::new("tool", e.to_string()))?;
            rt.persist()?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            if !report.passed {
                return Err(CliError::new("validation_failed", report.diagnostics().join("; ")));
            }
            Ok(())
        }
    }
}

fn cmd_replay(config: &RunConfig, session: &str, log: Option<&Path>, as_json: bool) -> CliResult {
    let path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.data_dir.join("events").join("sessions").join(format!("{session}.jsonl")));
    if !path.exists() {
        return Err(CliError::new("not_found", format!("no event log at {}", path.display())));
    }
    let replayed = replay_file(&path).map_err(|e| CliError::new("replay", e.to_string()))?;
    if let Some(t) = &replayed.truncated {
        eprintln!("{}", json!({"warning": "truncated", "line": t.line, "last_good_seq": t.last_good_seq, "reason": t.reason}));
    }
    let s = &replayed.session;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&session_json(s)).unwrap_or_default());
        return Ok(());
    }
    println!("session {} {}", s.id, s.status);
    match (&s.final_answer, &s.failure) {
        (Some(a), _) => println!("answer: {}", a.answer),
        (None, Some(f)) => println!("failure: {f}"),
        _ => {}
    }
    println!("state_hash: {}", s.state_hash());
    Ok(())
}
