//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 run error, 3 constraint infeasible.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llmsim::autoscale::ScalerSpec;
use llmsim::engine;
use llmsim::harness::{self, ExperimentPlan, Metric, TtftConstraint};
use llmsim::metrics::{emit_logs, results_dir, write_json};
use llmsim::report::build_report;
use llmsim::routing::{PolicyKind, Threshold};
use llmsim::{RunConfig, SimError};

// Write errors such as a closed pipe are ignored.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "llmsim", version, about = "LLM serving cluster simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One simulation; writes logs, config.json and summary.json.
    Run(RunArgs),
    /// Several policies over a seed list, with 90% bootstrap intervals.
    Compare(CompareArgs),
    /// HRA over an (m, r_threshold) grid.
    Sweep(SweepArgs),
    /// Largest rate meeting a TTFT percentile limit in every seed.
    MaxQps(MaxQpsArgs),
    /// GPU hours and p95 slowdown per autoscaler.
    Autoscale(AutoscaleArgs),
    /// Plots and a markdown summary from run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (config.json format).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to simulator_results/<name>/<timestamp>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Offered rate: open-loop target or closed-loop pacing.
    #[arg(long)]
    qps: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<PolicyKind>,
}

#[derive(Args)]
struct SeedArgs {
    /// Inclusive seed range `n..m`; default: 10 seeds from the config seed.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedRange>,
    /// Single seed; shorthand for `--seeds n..n`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
}

impl SeedArgs {
    fn resolve(&self, config: &RunConfig) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(s), _) => s.0.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => harness::default_seeds(config.seed),
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Policies to compare; repeat or comma-separate.
    #[arg(long = "policy", value_delimiter = ',', required = true)]
    policies: Vec<PolicyKind>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Margins to try, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.02, 0.05, 0.1, 0.2])]
    m: Vec<f64>,
    /// Ratio thresholds to try, comma-separated; `inf` allowed.
    #[arg(long = "r", value_delimiter = ',', default_values = ["0", "4", "8"])]
    r: Vec<Threshold>,
}

#[derive(Args)]
struct MaxQpsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    #[arg(long, default_value_t = 1.0)]
    lo: f64,
    #[arg(long, default_value_t = 16.0)]
    hi: f64,
    #[arg(long, default_value_t = 0.25)]
    step: f64,
    /// TTFT limit in milliseconds; `inf` disables it.
    #[arg(long, default_value_t = 1500.0)]
    ttft_limit_ms: f64,
    #[arg(long, default_value_t = 90)]
    percentile: u32,
}

#[derive(Args)]
struct AutoscaleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// JSON list of autoscaler specs; the first is the baseline.
    #[arg(long)]
    scalers: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    slowdown_limit: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding request_metrics.csv and gs_log.csv.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone)]
struct SeedRange(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected n..m, got `{s}`"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad seed `{a}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad seed `{b}`"))?;
    if b < a {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(SeedRange((a..=b).collect()))
}

enum Failure {
    Run(SimError),
    Infeasible(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Run(e)
    }
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(qps) = common.qps {
        config = harness::with_qps(config, qps)?;
    }
    Ok(config)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

fn out_dir(common: &Common, name: &str) -> Result<PathBuf, Failure> {
    make_dir(common.out.clone().unwrap_or_else(|| results_dir(name)))
}

fn make_dir(dir: PathBuf) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&dir).map_err(|e| SimError::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut config = load(&args.common)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(policy) = args.policy {
        config.policy = policy;
    }
    let out = engine::run(&config)?;
    let name = format!("{}_{}", stem(&args.common.config), config.policy);
    let dir = match (&args.common.out, &config.output_dir) {
        (None, Some(d)) => make_dir(d.clone())?,
        _ => out_dir(&args.common, &name)?,
    };
    emit_logs(&dir, &config, &out.summary, &out.records, &out.logs)?;
    outln!(
        "{}",
        serde_json::to_string_pretty(&out.summary).expect("summary serializes")
    );
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let config = load(&args.common)?;
    let mut plan = ExperimentPlan::new(stem(&args.common.config), config);
    plan.seeds = args.seeds.resolve(&plan.base);
    plan.policies = args.policies;
    let table = harness::compare(&plan)?;
    let dir = out_dir(&args.common, &format!("{}_compare", plan.name))?;
    table.write_csv(&dir.join("comparison.csv"))?;
    write_json(&dir.join("comparison.json"), &table)?;
    out!("{}", table.render());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let config = load(&args.common)?;
    let seeds = args.seeds.resolve(&config);
    let grid: Vec<(f64, Threshold)> = args
        .m
        .iter()
        .flat_map(|&m| args.r.iter().map(move |&r| (m, r)))
        .collect();
    let result = harness::sweep_hra(&config, &grid, &seeds, Metric::MeanRt)?;
    let dir = out_dir(
        &args.common,
        &format!("{}_sweep", stem(&args.common.config)),
    )?;
    result.write_csv(&dir.join("sweep.csv"))?;
    write_json(&dir.join("sweep.json"), &result)?;
    out!("{}", result.render());
    match result.best_point() {
        Some(p) => {
            outln!("best: m={} r_threshold={}", p.m, p.r_threshold);
            Ok(())
        }
        None => Err(Failure::Infeasible("every grid point failed".into())),
    }
}

fn cmd_max_qps(args: MaxQpsArgs) -> Result<(), Failure> {
    let config = load(&args.common)?;
    let seeds = args.seeds.resolve(&config);
    let constraint = TtftConstraint {
        percentile: args.percentile,
        limit: args.ttft_limit_ms / 1000.0,
    };
    let result = harness::max_qps(&config, &seeds, &constraint, args.lo, args.hi, args.step)?;
    let dir = out_dir(
        &args.common,
        &format!("{}_max_qps", stem(&args.common.config)),
    )?;
    write_json(&dir.join("max_qps.json"), &result)?;
    for p in &result.curve {
        outln!(
            "qps {:>7.2}  worst p{} ttft {:>8.3}s  {}",
            p.qps,
            args.percentile,
            p.worst_ttft,
            if p.compliant { "ok" } else { "violates" }
        );
    }
    if !result.non_monotone.is_empty() {
        outln!(
            "non-monotone compliance (noise) at {:?}",
            result.non_monotone
        );
    }
    match result.best {
        Some(q) => {
            outln!("max compliant qps: {q}");
            Ok(())
        }
        None => Err(Failure::Infeasible(format!(
            "no rate in [{}, {}] meets the constraint",
            args.lo, args.hi
        ))),
    }
}

fn cmd_autoscale(args: AutoscaleArgs) -> Result<(), Failure> {
    let config = load(&args.common)?;
    let seeds = args.seeds.resolve(&config);
    let text = std::fs::read_to_string(&args.scalers).map_err(|e| SimError::Io {
        path: args.scalers.clone(),
        source: e,
    })?;
    let scalers: Vec<ScalerSpec> = serde_json::from_str(&text).map_err(|e| SimError::Json {
        path: args.scalers.clone(),
        source: e,
    })?;
    let report = harness::autoscale_report(&config, &scalers, &seeds, args.slowdown_limit)?;
    let dir = out_dir(
        &args.common,
        &format!("{}_autoscale", stem(&args.common.config)),
    )?;
    report.write_csv(&dir.join("autoscale.csv"))?;
    out!("{}", report.render());
    if report.rows.iter().any(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Infeasible(format!(
            "no autoscaler keeps p95 slowdown within {}",
            args.slowdown_limit
        )))
    }
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let out = args.out.unwrap_or_else(|| results_dir("report"));
    let report = build_report(&args.runs, &out)?;
    for f in &report.files {
        outln!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::MaxQps(a) => cmd_max_qps(a),
        Command::Autoscale(a) => cmd_autoscale(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            ExitCode::from(3)
        }
    }
}
