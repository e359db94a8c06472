use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmc_core::controller::export_trace;
use cmc_core::experiment::{run_experiment, ExperimentConfig};
use cmc_core::gridworld::{run_gridworld_batch, RoomSpec};
use cmc_core::inverse::PayoffRegressor;
use cmc_core::io::{read_episodes, read_model, read_room, write_episodes};
use cmc_core::rls::{check_lambda, DEFAULT_DELTA, DEFAULT_LAMBDA};
use cmc_core::{
    enumerate_strategies, simulate_batch, solve_direct, ControllerConfig, Execution, GainModel,
    MarkovPayoffModel, Strategy, TeacherSchedule,
};
use cmc_service::{ServiceDefaults, SessionStore, SnapshotFile};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cmc", version, about = "Controlled Markov chain workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the stationary strategy with the best steady-state mean payoff.
    Solve(SolveArgs),
    /// Generate episodes from a model and write them as JSON Lines.
    Simulate(SimulateArgs),
    /// Teacher episodes, estimation and re-planning, end to end.
    Experiment(ExperimentArgs),
    /// Run the bump-sensor robot and report coverage.
    Gridworld(GridworldArgs),
    /// Fit the estimator to an episode log.
    Fit(FitArgs),
    /// Start the HTTP teaching service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Model JSON file; the built-in two-state example when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<MarkovPayoffModel> {
        match &self.model {
            Some(p) => Ok(read_model(p)?),
            None => Ok(MarkovPayoffModel::table1()),
        }
    }
}

#[derive(Args)]
struct EstimatorArgs {
    /// Initial covariance scale, Q0 = delta·I.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Forgetting factor in (0, 1].
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = RegressorArg::Transitions)]
    regressor: RegressorArg,
}

impl EstimatorArgs {
    fn check(&self) -> Result<()> {
        check_delta(self.delta)?;
        check_lambda(self.lambda)?;
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta > 0.0) {
        bail!("--delta must be positive and finite, got {delta}");
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressorArg {
    /// Per-episode transition counts (recovers R^k).
    Transitions,
    /// Per-episode (state, decision) visit counts.
    Visits,
}

impl From<RegressorArg> for PayoffRegressor {
    fn from(r: RegressorArg) -> Self {
        match r {
            RegressorArg::Transitions => PayoffRegressor::TransitionCounts,
            RegressorArg::Visits => PayoffRegressor::VisitCounts,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Teacher schedule, e.g. "0,1*50;1,0*50". Entries without counts are
    /// cycled. Defaults to cycling through every pure strategy.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Drop per-step payoffs, leaving what an observer sees.
    #[arg(long)]
    observed: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Teacher schedule, as for `simulate`.
    #[arg(long)]
    schedule: Option<String>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Convergence trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GridworldArgs {
    /// Room as JSON or ASCII art ('#' blocked); an empty 20x20 room when omitted.
    #[arg(long)]
    room: Option<PathBuf>,
    /// Reaction per sensor: decision for a left bump, then for a right bump.
    #[arg(long, default_value = "0 1")]
    policy: Strategy,
    /// Reactions per episode.
    #[arg(long, default_value_t = 50)]
    bumps: usize,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Episode log (JSON Lines).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Episode log (JSON Lines), as written by `simulate` or the service.
    log: PathBuf,
    /// Model file. Sets the dimensions and adds the true gain of each
    /// recommendation to the trace.
    #[arg(long, conflicts_with_all = ["states", "decisions"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 2)]
    decisions: usize,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Snapshot JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Convergence trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "CMC_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Session storage. Sessions are kept in memory only when omitted.
    #[arg(long, env = "CMC_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "CMC_DELTA", default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, env = "CMC_LAMBDA", default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn check_count(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        bail!("--{name} must be at least 1");
    }
    Ok(())
}

/// Parses "0,1*25;1,0*25". Without any counts the listed strategies are
/// cycled to fill `episodes`; with counts they must add up to `episodes`.
fn parse_schedule(
    text: &str,
    episodes: usize,
    model: &MarkovPayoffModel,
) -> Result<TeacherSchedule> {
    let mut entries = Vec::new();
    let mut counted = 0;
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (strategy, count) = match part.split_once('*') {
            Some((s, n)) => {
                counted += 1;
                let n: usize = n
                    .trim()
                    .parse()
                    .with_context(|| format!("bad count in {part:?}"))?;
                (s, n)
            }
            None => (part, 1),
        };
        entries.push((strategy.parse::<Strategy>()?, count));
    }
    if entries.is_empty() {
        bail!("empty --schedule");
    }
    let schedule = if counted == 0 {
        let strategies: Vec<Strategy> = entries.into_iter().map(|(s, _)| s).collect();
        TeacherSchedule::round_robin(&strategies, episodes)
    } else if counted == entries.len() {
        TeacherSchedule::new(entries)
    } else {
        bail!("--schedule: give a count for every entry or for none");
    };
    if schedule.num_episodes() != episodes {
        bail!(
            "--schedule covers {} episodes but --episodes is {episodes}",
            schedule.num_episodes()
        );
    }
    schedule.check(model)?;
    Ok(schedule)
}

fn default_schedule(model: &MarkovPayoffModel, episodes: usize) -> Result<TeacherSchedule> {
    let all = enumerate_strategies(model.num_states, model.num_decisions)?;
    Ok(TeacherSchedule::round_robin(&all, episodes))
}

fn solve(args: SolveArgs) -> Result<()> {
    let model = args.model.load()?;
    let gm = GainModel::from_model(&model)?;
    let solution = solve_direct(&gm)?;
    let mut out = output(None)?;
    if args.json {
        serde_json::to_writer_pretty(&mut out, &solution)?;
        writeln!(out)?;
        return Ok(out.flush()?);
    }
    let k = model.num_decisions;
    writeln!(
        out,
        "{:>4}  {:<12} {:>14}  stationary",
        "id", "strategy", "V"
    )?;
    for row in &solution.table {
        let id = row.strategy.index(k);
        match &row.evaluation {
            Some(e) => {
                let p: Vec<String> = e.stationary.iter().map(|x| format!("{x:.6}")).collect();
                writeln!(
                    out,
                    "{id:>4}  {:<12} {:>14.6}  {}",
                    row.strategy.to_string(),
                    e.mean_gain,
                    p.join(" ")
                )?;
            }
            None => writeln!(
                out,
                "{id:>4}  {:<12} {:>14}",
                row.strategy.to_string(),
                "non-ergodic"
            )?,
        }
    }
    let best = &solution.best;
    writeln!(
        out,
        "best: {} (id {}) V = {:.6}",
        best.strategy,
        best.strategy.index(k),
        best.mean_gain
    )?;
    Ok(out.flush()?)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    check_count("episodes", args.episodes)?;
    check_count("steps", args.steps)?;
    let model = args.model.load()?;
    let schedule = match &args.schedule {
        Some(s) => parse_schedule(s, args.episodes, &model)?,
        None => default_schedule(&model, args.episodes)?,
    };
    let episodes = simulate_batch(&model, &schedule, args.steps, args.seed)?;
    let mut out = output(args.out.as_deref())?;
    write_episodes(&mut out, &episodes, args.observed)?;
    Ok(out.flush()?)
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    check_count("episodes", args.episodes)?;
    check_count("steps", args.steps)?;
    args.estimator.check()?;
    let model = args.model.load()?;
    let schedule = match &args.schedule {
        Some(s) => Some(parse_schedule(s, args.episodes, &model)?),
        None => None,
    };
    let config = ExperimentConfig {
        episodes: args.episodes,
        steps_per_episode: args.steps,
        seed: args.seed,
        schedule,
        delta: args.estimator.delta,
        lambda: args.estimator.lambda,
        regressor: args.estimator.regressor.into(),
    };
    let outcome = run_experiment(&model, &config)?;
    if let Some(path) = &args.out {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        export_trace(&outcome.trace, BufWriter::new(file))?;
    }
    let s = &outcome.summary;
    let mut out = output(None)?;
    if args.json {
        serde_json::to_writer_pretty(&mut out, s)?;
        writeln!(out)?;
        return Ok(out.flush()?);
    }
    writeln!(
        out,
        "episodes: {} x {} steps, seed {}",
        s.episodes, s.steps_per_episode, s.seed
    )?;
    writeln!(
        out,
        "optimal: {} (id {}) V = {:.6}",
        s.optimal_strategy, s.optimal_id, s.optimal_gain
    )?;
    writeln!(
        out,
        "recommended: {} (id {}) V_hat = {:.6}",
        outcome.snapshot.recommended, s.final_recommended_id, s.final_v_hat
    )?;
    writeln!(out, "max |p_hat - p|: {:.6}", s.final_p_error)?;
    writeln!(out, "max |r_hat - r|: {:.6}", s.final_r_error)?;
    match s.first_stable_optimal_q {
        Some(q) => writeln!(out, "optimal from episode: {q}")?,
        None => writeln!(out, "optimal from episode: never")?,
    }
    writeln!(out, "identification rate: {:.4}", s.identification_rate)?;
    Ok(out.flush()?)
}

#[derive(Serialize)]
struct CoverageRow {
    episode: usize,
    bumps: usize,
    scanned_cells: usize,
    free_cells: usize,
    coverage: f64,
    stuck: bool,
}

#[derive(Serialize)]
struct CoverageReport {
    policy: Strategy,
    width: usize,
    height: usize,
    episodes: Vec<CoverageRow>,
    mean_coverage: f64,
}

fn gridworld(args: GridworldArgs) -> Result<()> {
    check_count("episodes", args.episodes)?;
    check_count("bumps", args.bumps)?;
    args.policy.check(2, 2)?;
    let room = match &args.room {
        Some(p) => read_room(p)?,
        None => RoomSpec::empty(20, 20),
    };
    let runs = run_gridworld_batch(
        &room,
        &args.policy,
        args.bumps,
        args.episodes,
        args.seed,
        Execution::default(),
    )?;
    if let Some(path) = &args.out {
        let eps: Vec<_> = runs.iter().map(|r| r.episode.clone()).collect();
        let mut w = output(Some(path))?;
        write_episodes(&mut w, &eps, false)?;
        w.flush()?;
    }
    let rows: Vec<CoverageRow> = runs
        .iter()
        .enumerate()
        .map(|(n, r)| CoverageRow {
            episode: n,
            bumps: r.episode.len(),
            scanned_cells: r.scanned_cells,
            free_cells: r.free_cells,
            coverage: r.scanned_cells as f64 / r.free_cells as f64,
            stuck: r.stuck,
        })
        .collect();
    let report = CoverageReport {
        policy: args.policy,
        width: room.width,
        height: room.height,
        mean_coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / rows.len() as f64,
        episodes: rows,
    };
    let mut out = output(None)?;
    if args.json {
        serde_json::to_writer_pretty(&mut out, &report)?;
        writeln!(out)?;
        return Ok(out.flush()?);
    }
    writeln!(
        out,
        "room {}x{}, policy {}",
        report.width, report.height, report.policy
    )?;
    writeln!(
        out,
        "{:>7} {:>6} {:>8} {:>6} {:>9}",
        "episode", "bumps", "scanned", "free", "coverage"
    )?;
    for r in &report.episodes {
        writeln!(
            out,
            "{:>7} {:>6} {:>8} {:>6} {:>9.4}{}",
            r.episode,
            r.bumps,
            r.scanned_cells,
            r.free_cells,
            r.coverage,
            if r.stuck { "  stuck" } else { "" }
        )?;
    }
    writeln!(out, "mean coverage: {:.4}", report.mean_coverage)?;
    Ok(out.flush()?)
}

fn fit(args: FitArgs) -> Result<()> {
    args.estimator.check()?;
    let file = File::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    let episodes = read_episodes(BufReader::new(file))?;
    if episodes.is_empty() {
        bail!("{} holds no episodes", args.log.display());
    }
    let (m, k, truth) = match &args.model {
        Some(p) => {
            let model = read_model(p)?;
            (
                model.num_states,
                model.num_decisions,
                Some(GainModel::from_model(&model)?),
            )
        }
        None => (args.states, args.decisions, None),
    };
    for (n, e) in episodes.iter().enumerate() {
        e.check(m, k)
            .with_context(|| format!("episode {} of {}", n + 1, args.log.display()))?;
    }
    let config = ControllerConfig::new(m, k)
        .with_delta(args.estimator.delta)
        .with_lambda(args.estimator.lambda)
        .with_regressor(args.estimator.regressor.into());
    let controller = cmc_core::AdaptiveController::new(config)?;
    let mut controller = match truth {
        Some(t) => controller.with_truth(t)?,
        None => controller,
    };
    let mut snapshot = None;
    for e in &episodes {
        snapshot = Some(controller.process_episode(e)?);
    }
    let file = SnapshotFile {
        snapshot: snapshot.expect("non-empty log"),
        estimator: controller.estimator().snapshot(),
    };
    if let Some(path) = &args.trace {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        export_trace(controller.trace(), BufWriter::new(f))?;
    }
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    writeln!(out)?;
    Ok(out.flush()?)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(args: ServeArgs) -> Result<()> {
    check_delta(args.delta)?;
    check_lambda(args.lambda)?;
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let defaults = ServiceDefaults {
        delta: args.delta,
        lambda: args.lambda,
    };
    let store = match &args.data_dir {
        Some(dir) => SessionStore::open(dir, defaults)
            .with_context(|| format!("opening data directory {}", dir.display()))?,
        None => SessionStore::in_memory(defaults),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        cmc_service::serve(listener, Arc::new(store), shutdown_signal()).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(a) => solve(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
        Command::Gridworld(a) => gridworld(a),
        Command::Fit(a) => fit(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
