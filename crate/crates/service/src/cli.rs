//! The `ical` command line: learn, deploy, sweep and serve.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ical::backend::BackendSpec;
use ical::config::RunConfig;
use ical::deploy::evaluate_suite;
use ical::engine::Engine;
use ical::hitl::{FeedbackRequest, FeedbackSource, FeedbackSourceKind, ScriptedOracle};
use ical::model::Action;
use ical::pipeline::{generate_demos, learn, read_demos, sweep, sweep_table, DemoRecord, LearnSummary};
use ical::sim::{Catalog, Review, Split, TaskSpec};

use crate::api;
use crate::events::EventLog;
use crate::manager::SessionManager;

#[derive(Debug, Parser)]
#[command(name = "ical", version, about = "Learn annotated examples from demonstrations and deploy with them")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `live` or `mock:<fixture>` (`mock:rules`, `mock:echo` or a transcript file).
    #[arg(long, global = true)]
    pub backend: Option<BackendSpec>,
    /// Demo split for learn and serve, evaluation split for deploy and sweep.
    #[arg(long, global = true)]
    pub split: Option<Split>,
    /// Persistent memory directory.
    #[arg(long, global = true)]
    pub memory: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Abstract demonstrations and verify them into the memory.
    Learn(LearnArgs),
    /// Evaluate held-out tasks with the memory.
    Deploy(DeployArgs),
    /// Evaluate with growing prefixes of the memory.
    Sweep(SweepArgs),
    /// Run verification sessions answered over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeedbackMode {
    Oracle,
    Stdin,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    /// JSONL demo records; generated from the catalog when omitted.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Number of generated demos.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub demos: DemoArgs,
    /// Store the best partial attempt of an exhausted session.
    #[arg(long)]
    pub relabel: bool,
    /// Ask for approval before every action.
    #[arg(long)]
    pub review: bool,
    #[arg(long, value_enum, default_value_t = FeedbackMode::Oracle)]
    pub feedback: FeedbackMode,
    /// Write the learning summary as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Number of tasks, interleaved across families.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Learn from demos into the memory first.
    #[arg(long)]
    pub learn: bool,
    #[command(flatten)]
    pub demos: DemoArgs,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated memory sizes; `all` is the whole memory.
    #[arg(long, value_parser = parse_sizes)]
    pub sizes: Option<Sizes>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub demos: DemoArgs,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub review: bool,
    /// Sessions awaiting a reviewer at once.
    #[arg(long, default_value_t = 4)]
    pub concurrent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sizes(pub Vec<usize>);

pub fn parse_sizes(s: &str) -> Result<Sizes, String> {
    s.split(',')
        .map(str::trim)
        .map(|x| match x {
            "all" => Ok(usize::MAX),
            _ => x.parse().map_err(|_| format!("`{x}` is not a size or `all`")),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Sizes)
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Learn(a) => cmd_learn(&cfg, cli.split, a),
        Command::Deploy(a) => cmd_deploy(&cfg, cli.split, a),
        Command::Sweep(a) => cmd_sweep(&cfg, cli.split, a),
        Command::Serve(a) => cmd_serve(&cfg, cli.split, a),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.backend {
        cfg.backend.spec = b.clone();
    }
    if let Some(m) = &cli.memory {
        cfg.paths.memory_dir = Some(m.clone());
    }
    cfg.check_paths()?;
    Ok(cfg)
}

/// Demo records and the number of unreadable lines.
fn demos(cfg: &RunConfig, catalog: &Catalog, split: Split, a: &DemoArgs) -> Result<(Vec<DemoRecord>, usize)> {
    match a.demos.as_ref().or(cfg.paths.demos.as_ref()) {
        Some(p) => {
            let (mut d, bad) = read_demos(p).with_context(|| format!("reading {}", p.display()))?;
            if let Some(n) = a.count {
                d.truncate(n);
            }
            Ok((d, bad))
        }
        None => Ok((generate_demos(catalog, split, a.count.unwrap_or(cfg.demos.count), cfg.seed, cfg.demos.noise), 0)),
    }
}

fn learn_into(engine: &Engine, catalog: &Catalog, cfg: &RunConfig, split: Split, a: &DemoArgs) -> Result<LearnSummary> {
    let (d, bad) = demos(cfg, catalog, split, a)?;
    let mut s = learn(engine, catalog, &d, &cfg.learn_config(), &mut ScriptedOracle);
    s.unreadable += bad;
    Ok(s)
}

fn cmd_learn(cfg: &RunConfig, split: Option<Split>, a: LearnArgs) -> Result<()> {
    let (catalog, engine) = cfg.build()?;
    let (d, bad) = demos(cfg, &catalog, split.unwrap_or(cfg.demos.split), &a.demos)?;
    let mut lc = cfg.learn_config();
    lc.hitl.relabel |= a.relabel;
    lc.hitl.review_each_step |= a.review;
    let mut summary = match a.feedback {
        FeedbackMode::Oracle => learn(&engine, &catalog, &d, &lc, &mut ScriptedOracle),
        FeedbackMode::Stdin => learn(&engine, &catalog, &d, &lc, &mut StdinSource::new(a.review)),
    };
    summary.unreadable += bad;
    print!("{}", summary.table());
    println!("memory holds {} examples", engine.memory.len());
    if let Some(p) = a.out {
        write(&p, &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

fn eval_setup(cfg: &RunConfig, split: Option<Split>, a: &EvalArgs) -> Result<(Arc<Catalog>, Engine, Split, Vec<TaskSpec>)> {
    let (catalog, engine) = cfg.build()?;
    if a.learn {
        let s = learn_into(&engine, &catalog, cfg, cfg.demos.split, &a.demos)?;
        print!("{}", s.table());
    }
    let split = split.unwrap_or(cfg.eval.split);
    let tasks: Vec<TaskSpec> = catalog.interleaved(split, a.tasks.unwrap_or(cfg.eval.tasks)).into_iter().cloned().collect();
    if tasks.is_empty() {
        bail!("no {split:?} tasks in the catalog");
    }
    Ok((catalog, engine, split, tasks))
}

fn report_dir(cfg: &RunConfig, a: &EvalArgs) -> PathBuf {
    a.out.clone().or_else(|| cfg.paths.reports.clone()).unwrap_or_else(|| PathBuf::from("reports"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_deploy(cfg: &RunConfig, split: Option<Split>, a: DeployArgs) -> Result<()> {
    let (_, engine, split, tasks) = eval_setup(cfg, split, &a.eval)?;
    if engine.memory.is_empty() {
        eprintln!("note: the memory is empty; pass --memory or --learn to deploy with examples");
    }
    let label = format!("|M|={}", engine.memory.len());
    let report = evaluate_suite(&engine, &label, &tasks, Some(split), cfg.seed, &cfg.deploy);
    let dir = report_dir(cfg, &a.eval);
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("episodes.csv"), &report.csv())?;
    write(&dir.join("summary.txt"), &report.table())?;
    print!("{}", report.table());
    println!("reports written to {}", dir.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, split: Option<Split>, a: SweepArgs) -> Result<()> {
    let (_, engine, split, tasks) = eval_setup(cfg, split, &a.eval)?;
    if engine.memory.is_empty() {
        bail!("the memory is empty; pass --memory or --learn");
    }
    let sizes = a.sizes.map_or_else(|| cfg.eval.sweep_sizes.clone(), |s| s.0);
    let points = sweep(&engine, &tasks, Some(split), &sizes, cfg.seed, &cfg.deploy);
    let dir = report_dir(cfg, &a.eval);
    write(&dir.join("sweep.json"), &serde_json::to_string_pretty(&points)?)?;
    write(&dir.join("sweep.txt"), &sweep_table(&points))?;
    print!("{}", sweep_table(&points));
    println!("reports written to {}", dir.display());
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, split: Option<Split>, a: ServeArgs) -> Result<()> {
    let (catalog, engine) = cfg.build()?;
    let (d, bad) = demos(cfg, &catalog, split.unwrap_or(cfg.demos.split), &a.demos)?;
    if bad > 0 {
        eprintln!("note: {bad} unreadable demo records skipped");
    }
    let mut lc = cfg.learn_config();
    lc.hitl.review_each_step |= a.review;
    let events = Arc::new(EventLog::new(cfg.serve.event_buffer));
    let manager = Arc::new(SessionManager::new(engine, catalog, lc, d, a.concurrent, events));
    let bind = a.bind.unwrap_or_else(|| cfg.serve.bind.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        println!("listening on http://{}/api/v1", listener.local_addr()?);
        let m = manager.clone();
        tokio::task::spawn_blocking(move || m.fill());
        axum::serve(listener, api::router(manager))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

/// Reads reviews and feedback from standard input.
struct StdinSource {
    review: bool,
}

impl StdinSource {
    fn new(review: bool) -> Self {
        Self { review }
    }

    fn line(prompt: &str) -> Option<String> {
        eprint!("{prompt}");
        let _ = std::io::stderr().flush();
        let mut s = String::new();
        match std::io::stdin().lock().read_line(&mut s) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(s.trim().to_string()),
        }
    }
}

impl FeedbackSource for StdinSource {
    fn kind(&self) -> FeedbackSourceKind {
        FeedbackSourceKind::Cli
    }

    fn review(&mut self, index: usize, action: &Action, state: &str) -> Review {
        if !self.review {
            return Review::Proceed;
        }
        eprintln!("{state}");
        match Self::line(&format!("step {index}: {action}  [enter to run, or say what is wrong] ")) {
            Some(t) if !t.is_empty() => Review::Reject(t),
            _ => Review::Proceed,
        }
    }

    fn feedback(&mut self, request: &FeedbackRequest) -> Option<String> {
        if let Some(f) = &request.failure {
            eprintln!("step {} failed: {f}", request.step_index);
        }
        for g in &request.unmet_goals {
            eprintln!("unmet: {g}");
        }
        let suggested = request.oracle_text();
        let hint = suggested.as_deref().map(|s| format!(" [enter for: {s}]")).unwrap_or_default();
        match Self::line(&format!("feedback{hint}: "))? {
            t if t.is_empty() => suggested,
            t => Some(t),
        }
    }
}
