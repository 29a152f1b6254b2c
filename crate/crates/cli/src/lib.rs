//! `ovkv` command line: streaming runs, strategy probes and trace replay.
//!
//! Exit codes: 0 ok, 2 invalid config or infeasible budget, 3 I/O or parse
//! failure, 4 replay mismatch.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ovkv::sim::{oracle_full_cache_run, ProbeKind, ProbeReport, ProbeScorer, SceneKind, Simulation};
use ovkv::trace::{config_hash, read_trace, TraceError, TraceHeader, TraceWriter};
use ovkv::{Engine, EngineConfig, StepMetrics};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

/// Frames per window in the summary's timing table.
pub const TIMING_WINDOW: u64 = 100;

#[derive(Debug, Parser)]
#[command(name = "ovkv", version, about = "Bounded KV-cache streaming simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream a synthetic scene through the engine and write per-step metrics.
    Run(RunArgs),
    /// Compare eviction strategies against an unbounded cache over several seeds.
    Probe(ProbeArgs),
    /// Re-execute a recorded trace and check its metrics bit for bit.
    Replay(ReplayArgs),
}

/// Engine tunables. Unset flags fall back to the config file, then to the
/// defaults shown.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// JSON file with engine config fields; missing fields use the defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Total token budget B over all layers [default: 200000]
    #[arg(long)]
    pub budget: Option<usize>,
    /// Blend between smoothed and raw activation scores [default: 0.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of current-frame activation against historical diversity [default: 0.5]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Coverage ratio below which a new anchor is registered [default: 0.2]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Fraction of an anchor's patches kept protected [default: 0.05]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Maximum live historical anchors [default: 3]
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Minimum frames between anchor registrations [default: 100]
    #[arg(long = "min-interval")]
    pub min_interval: Option<u64>,
    /// Gaussian smoothing kernel size, odd [default: 5]
    #[arg(long = "kernel-size")]
    pub kernel_size: Option<usize>,
    /// Gaussian smoothing sigma [default: 1.0]
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Frames to stream
    #[arg(long, default_value_t = 300)]
    pub frames: u64,
    /// Camera trajectory: orbit, corridor or randomwalk
    #[arg(long, default_value_t = SceneKind::Orbit)]
    pub scene: SceneKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scorer for incoming tokens: ffn, attention, qk or random
    #[arg(long, default_value_t = ProbeKind::FfnResidual)]
    pub strategy: ProbeKind,
    /// Directory for metrics.jsonl, timing.jsonl and summary.json; without
    /// it the summary is printed
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Record a replayable trace of every frame (ffn strategy only)
    #[arg(long = "trace-out", value_name = "FILE")]
    pub trace_out: Option<PathBuf>,
    /// Replay this trace instead of simulating; same as `ovkv replay`
    #[arg(long, value_name = "FILE")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Frames per stream
    #[arg(long, default_value_t = 60)]
    pub frames: u64,
    #[arg(long, default_value_t = SceneKind::Orbit)]
    pub scene: SceneKind,
    /// First seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Strategies to compare, comma separated (at least two)
    #[arg(
        long = "strategy",
        visible_alias = "strategies",
        value_delimiter = ',',
        default_values_t = [ProbeKind::FfnResidual, ProbeKind::Random]
    )]
    pub strategies: Vec<ProbeKind>,
    /// Directory for probe.csv and probe.json; the table is always printed
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Trace written by `run --trace-out`
    #[arg(value_name = "TRACE")]
    pub trace: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Mismatch(m) => write!(f, "replay mismatch: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ovkv::Error> for CliError {
    fn from(e: ovkv::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::Io(e.to_string())
    }
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Recursively overlays `patch` onto `base`.
fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl EngineArgs {
    /// Toy-scale defaults, overlaid with the config file and then the flags.
    pub fn resolve(&self) -> Result<EngineConfig, CliError> {
        let mut cfg = match &self.config {
            None => EngineConfig::toy(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_at(path))?;
                let patch: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let mut base = serde_json::to_value(EngineConfig::toy()).expect("config serializes");
                merge_json(&mut base, patch);
                serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(v) = self.budget {
            cfg.total_budget = v;
        }
        if let Some(v) = self.alpha {
            cfg.smoothing_alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.hybrid_beta = v;
        }
        if let Some(v) = self.tau {
            cfg.coverage_tau = v;
        }
        if let Some(v) = self.eta {
            cfg.anchor_eta = v;
        }
        if let Some(v) = self.kmax {
            cfg.max_anchors = v;
        }
        if let Some(v) = self.min_interval {
            cfg.min_anchor_interval = v;
        }
        if let Some(v) = self.kernel_size {
            cfg.gaussian_kernel_size = v;
        }
        if let Some(v) = self.sigma {
            cfg.gaussian_sigma = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowTiming {
    pub first_frame: u64,
    pub last_frame: u64,
    pub mean_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scene: SceneKind,
    pub seed: u64,
    pub frames: u64,
    pub strategy: ProbeKind,
    pub config_hash: String,
    pub config: EngineConfig,
    pub peak_bytes: u64,
    pub peak_tokens: usize,
    pub evicted: usize,
    pub camera_evicted: usize,
    pub anchor_registrations: usize,
    pub anchor_demotions: usize,
    pub budget_violations: usize,
    pub step_ms_by_window: Vec<WindowTiming>,
}

pub fn summarize(
    metrics: &[StepMetrics],
    cfg: &EngineConfig,
    scene: SceneKind,
    seed: u64,
    strategy: ProbeKind,
) -> RunSummary {
    let step_ms_by_window = metrics
        .chunks(TIMING_WINDOW as usize)
        .map(|w| WindowTiming {
            first_frame: w[0].frame_index,
            last_frame: w[w.len() - 1].frame_index,
            mean_step_ms: w.iter().map(|m| m.step_ms).sum::<f64>() / w.len() as f64,
        })
        .collect();
    RunSummary {
        scene,
        seed,
        frames: metrics.len() as u64,
        strategy,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        peak_bytes: metrics.iter().map(|m| m.bytes_resident).max().unwrap_or(0),
        peak_tokens: metrics.iter().map(|m| m.peak_tokens).max().unwrap_or(0),
        evicted: metrics.iter().map(|m| m.evicted).sum(),
        camera_evicted: metrics.iter().map(|m| m.camera_evicted).sum(),
        anchor_registrations: metrics.iter().filter(|m| m.registered.is_some()).count(),
        anchor_demotions: metrics.iter().filter(|m| m.demoted.is_some()).count(),
        budget_violations: metrics.iter().map(|m| m.budget_violations(cfg.total_budget)).sum(),
        step_ms_by_window,
    }
}

fn write_json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

#[derive(Serialize)]
struct TimingRecord {
    frame_index: u64,
    step_ms: f64,
}

pub fn run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let cfg = args.engine.resolve()?;
    if args.trace_out.is_some() && args.strategy != ProbeKind::FfnResidual {
        return Err(CliError::Config(format!(
            "--trace-out replays with the ffn scorer; got --strategy {}",
            args.strategy
        )));
    }
    let sim = Simulation::new(&cfg, args.scene, args.seed, args.frames);
    let mut engine = Engine::new(cfg.clone())?;
    let mut scorer = ProbeScorer::new(args.strategy, &cfg, args.seed)?;

    let mut metrics_out = None;
    let mut timing_out = None;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let create = |name: &str| -> Result<BufWriter<File>, CliError> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(io_at(&p))?))
        };
        metrics_out = Some(create("metrics.jsonl")?);
        timing_out = Some(create("timing.jsonl")?);
    }
    let mut trace = match &args.trace_out {
        Some(p) => {
            let f = BufWriter::new(File::create(p).map_err(io_at(p))?);
            Some(TraceWriter::new(f, &TraceHeader::new(&cfg, args.seed)).map_err(io_at(p))?)
        }
        None => None,
    };

    for frame in sim.frames() {
        scorer.set_queries(frame.queries);
        let m = engine.step_with(&frame.input, &mut scorer)?;
        if let Some(out) = metrics_out.as_mut() {
            write_json_line(out, &m)?;
        }
        if let Some(out) = timing_out.as_mut() {
            write_json_line(
                out,
                &TimingRecord {
                    frame_index: m.frame_index,
                    step_ms: m.step_ms,
                },
            )?;
        }
        if let Some(t) = trace.as_mut() {
            t.write_frame(&frame.input, &m)?;
        }
    }
    if let Some(t) = trace {
        t.finish()?;
    }
    for out in [metrics_out, timing_out].into_iter().flatten() {
        out.into_inner().map_err(|e| CliError::Io(e.to_string()))?.sync_all()?;
    }

    let summary = summarize(engine.metrics(), &cfg, args.scene, args.seed, args.strategy);
    assert_eq!(summary.budget_violations, 0, "engine exceeded its budget");
    match &args.out {
        Some(dir) => {
            let p = dir.join("summary.json");
            fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_at(&p))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes")),
    }
    Ok(summary)
}

/// One row of the probe table, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub strategy: ProbeKind,
    pub seeds: usize,
    pub mean_proxy_error: f64,
    pub mean_step_ms: f64,
    pub peak_bytes: u64,
    pub attention_matrices: u64,
    pub budget_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutput {
    pub config_hash: String,
    pub config: EngineConfig,
    pub scene: SceneKind,
    pub rows: Vec<ProbeRow>,
    pub reports: Vec<ProbeReport>,
}

/// Worker count from `OVKV_THREADS`, or rayon's default when unset.
pub fn thread_count() -> Result<Option<usize>, CliError> {
    match std::env::var("OVKV_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("OVKV_THREADS must be a positive integer, got `{s}`"))),
        },
    }
}

pub fn aggregate(kinds: &[ProbeKind], reports: &[ProbeReport]) -> Vec<ProbeRow> {
    kinds
        .iter()
        .map(|&k| {
            let runs: Vec<_> = reports.iter().filter_map(|r| r.run(k)).collect();
            let n = runs.len().max(1) as f64;
            ProbeRow {
                strategy: k,
                seeds: runs.len(),
                mean_proxy_error: runs.iter().map(|r| r.mean_proxy_error).sum::<f64>() / n,
                mean_step_ms: runs.iter().map(|r| r.mean_step_ms).sum::<f64>() / n,
                peak_bytes: runs.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
                attention_matrices: runs.iter().map(|r| r.attention_matrices).sum(),
                budget_violations: runs.iter().map(|r| r.budget_violations).sum(),
            }
        })
        .collect()
}

pub fn probe(args: &ProbeArgs) -> Result<ProbeOutput, CliError> {
    let mut kinds: Vec<ProbeKind> = Vec::new();
    for k in &args.strategies {
        if !kinds.contains(k) {
            kinds.push(*k);
        }
    }
    if kinds.len() < 2 {
        return Err(CliError::Config("probe compares at least two distinct strategies".into()));
    }
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let cfg = args.engine.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Io(e.to_string()))?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let reports = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let sim = Simulation::new(&cfg, args.scene, seed, args.frames);
                oracle_full_cache_run(&sim.scene, &sim.model, &cfg, &kinds, seed)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let output = ProbeOutput {
        config_hash: config_hash(&cfg),
        config: cfg,
        scene: args.scene,
        rows: aggregate(&kinds, &reports),
        reports,
    };

    print_table(&output.rows);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let p = dir.join("probe.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        for row in &output.rows {
            w.serialize(row).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        }
        w.flush().map_err(io_at(&p))?;
        let p = dir.join("probe.json");
        fs::write(&p, serde_json::to_string_pretty(&output).expect("report serializes")).map_err(io_at(&p))?;
    }
    Ok(output)
}

fn print_table(rows: &[ProbeRow]) {
    println!(
        "{:<10} {:>6} {:>16} {:>12} {:>12} {:>12}",
        "strategy", "seeds", "mean_proxy_err", "mean_ms", "peak_bytes", "attn_mats"
    );
    for r in rows {
        println!(
            "{:<10} {:>6} {:>16.6} {:>12.4} {:>12} {:>12}",
            r.strategy.to_string(),
            r.seeds,
            r.mean_proxy_error,
            r.mean_step_ms,
            r.peak_bytes,
            r.attention_matrices
        );
    }
}

/// Fields whose serialized values differ between two metric records.
fn differing_fields(a: &StepMetrics, b: &StepMetrics) -> Vec<String> {
    let (Value::Object(a), Value::Object(b)) = (
        serde_json::to_value(a).expect("metrics serialize"),
        serde_json::to_value(b).expect("metrics serialize"),
    ) else {
        unreachable!("metrics serialize to objects");
    };
    a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

/// Replays a trace; returns the number of steps verified.
pub fn replay(path: &Path) -> Result<usize, CliError> {
    let file = File::open(path).map_err(io_at(path))?;
    let trace = read_trace(BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let Some(header) = trace.header else {
        return Ok(0);
    };
    let mut engine = Engine::new(header.config)?;
    for (step, recorded) in trace.frames.iter().enumerate() {
        let got = engine.step(&recorded.input).map_err(|e| {
            CliError::Mismatch(format!(
                "step {step} (frame {}) failed on replay: {e}",
                recorded.input.frame_index
            ))
        })?;
        let same = serde_json::to_string(&got).expect("metrics serialize")
            == serde_json::to_string(&recorded.metrics).expect("metrics serialize");
        if !same {
            return Err(CliError::Mismatch(format!(
                "step {step} (frame {}) diverges in {}",
                recorded.input.frame_index,
                differing_fields(&got, &recorded.metrics).join(", ")
            )));
        }
    }
    Ok(trace.frames.len())
}

fn report(result: Result<(), CliError>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("ovkv: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    if let Some(trace) = &args.replay {
        return cmd_replay(&ReplayArgs { trace: trace.clone() });
    }
    report(run(args).map(|_| ()))
}

pub fn cmd_probe(args: &ProbeArgs) -> i32 {
    report(probe(args).map(|_| ()))
}

pub fn cmd_replay(args: &ReplayArgs) -> i32 {
    report(replay(&args.trace).map(|n| println!("replayed {n} steps, metrics match")))
}

pub fn dispatch(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Replay(a) => cmd_replay(a),
    }
}
