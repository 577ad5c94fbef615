//! Multi-seed experiments: policy comparisons, HRA parameter sweeps,
//! constrained max-QPS search and autoscaler cost reports.
//!
//! Independent runs execute on the rayon pool; results are always merged
//! in seed order, so output does not depend on the degree of parallelism.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoscale::ScalerSpec;
use crate::config::RunConfig;
use crate::engine::{run_with_options, RunOptions};
use crate::error::{Result, SimError};
use crate::metrics::{AggregateSummary, ConfidenceInterval, RunSummary};
use crate::routing::{HraParams, PolicyKind, Threshold};
use crate::sim::{SimRng, Substream};
use crate::workload::WorkloadMode;

pub const DEFAULT_SEED_COUNT: u64 = 10;

pub fn default_seeds(base: u64) -> Vec<u64> {
    (base..base + DEFAULT_SEED_COUNT).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    MeanRt,
    P95Rt,
    P90Ttft,
    RestartFraction,
    P95Slowdown,
    GpuHours,
}

impl Metric {
    pub fn of(self, s: &RunSummary) -> f64 {
        match self {
            Metric::MeanRt => s.mean_rt,
            Metric::P95Rt => s.rt.p95,
            Metric::P90Ttft => s.ttft.p90,
            Metric::RestartFraction => s.restart_fraction,
            Metric::P95Slowdown => s.slowdown.p95,
            Metric::GpuHours => s.gpu_hours,
        }
    }

    fn interval(self, a: &AggregateSummary) -> ConfidenceInterval {
        match self {
            Metric::MeanRt => a.mean_rt,
            Metric::P95Rt => a.rt_p95,
            Metric::P90Ttft => a.ttft_p90,
            Metric::RestartFraction => a.restart_fraction,
            Metric::P95Slowdown => a.slowdown_p95,
            Metric::GpuHours => a.gpu_hours,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub base: RunConfig,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: Option<Vec<(f64, Threshold)>>,
    #[serde(default)]
    pub metric: Metric,
}

impl ExperimentPlan {
    pub fn new(name: impl Into<String>, base: RunConfig) -> Self {
        let seeds = default_seeds(base.seed);
        ExperimentPlan {
            name: name.into(),
            policies: vec![base.policy],
            base,
            seeds,
            grid: None,
            metric: Metric::MeanRt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.seeds.is_empty() {
            return Err(SimError::InvalidConfig(
                "an experiment needs at least one policy and one seed".into(),
            ));
        }
        self.base.validate()
    }
}

/// Runs `config` once per seed without collecting logs. The result vector
/// is in seed order; one failing seed does not affect the others.
pub fn run_seeds(config: &RunConfig, seeds: &[u64]) -> Vec<Result<RunSummary>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            run_with_options(
                &c,
                RunOptions {
                    logs: false,
                    trace: false,
                },
            )
            .map(|o| o.summary)
        })
        .collect()
}

/// All seeds or the first error.
pub fn run_all(config: &RunConfig, seeds: &[u64]) -> Result<Vec<RunSummary>> {
    run_seeds(config, seeds).into_iter().collect()
}

/// Bootstrap randomness for a plan: the bootstrap substream of its first
/// seed.
fn bootstrap_rng(seeds: &[u64]) -> ChaCha8Rng {
    let seed = seeds.first().copied().unwrap_or(0);
    let mut rng = SimRng::new(seed);
    ChaCha8Rng::seed_from_u64(rand::RngCore::next_u64(rng.stream(Substream::Bootstrap)))
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub policy: PolicyKind,
    pub runs: Vec<RunSummary>,
    pub aggregate: Option<AggregateSummary>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub metric: Metric,
    /// Ascending by the metric's point estimate; failed rows last.
    pub rows: Vec<CompareRow>,
    /// True with a single seed: intervals are points.
    pub single_seed: bool,
}

#[derive(Serialize)]
struct CompareCsvRow<'a> {
    policy: &'a str,
    seeds: usize,
    point: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    restart_fraction: Option<f64>,
    status: &'a str,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn interval(&self, row: &CompareRow) -> Option<ConfidenceInterval> {
        row.aggregate.as_ref().map(|a| self.metric.interval(a))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            let ci = self.interval(row);
            w.serialize(CompareCsvRow {
                policy: &row.label,
                seeds: row.runs.len(),
                point: ci.map(|c| c.point),
                ci_lo: ci.map(|c| c.lo),
                ci_hi: ci.map(|c| c.hi),
                restart_fraction: row.aggregate.as_ref().map(|a| a.restart_fraction.point),
                status: if row.error.is_some() { "FAIL" } else { "ok" },
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| SimError::io(path, e))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>22} {:>9}",
            "policy", "point", "90% CI", "restarts"
        );
        for row in &self.rows {
            match (&row.error, self.interval(row)) {
                (None, Some(ci)) => {
                    let _ = writeln!(
                        out,
                        "{:<14} {:>10.3} {:>22} {:>9.3}",
                        row.label,
                        ci.point,
                        format!("[{:.3}, {:.3}]", ci.lo, ci.hi),
                        row.aggregate
                            .as_ref()
                            .map_or(0.0, |a| a.restart_fraction.point)
                    );
                }
                (err, _) => {
                    let _ = writeln!(
                        out,
                        "{:<14} FAIL {}",
                        row.label,
                        err.as_deref().unwrap_or("")
                    );
                }
            }
        }
        if self.single_seed {
            out.push_str("(single seed: intervals collapse to the point estimate)\n");
        }
        out
    }
}

fn csv_error(path: &Path, e: csv::Error) -> SimError {
    SimError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Every policy of the plan on every seed. Policies listed twice get
/// distinct labels.
pub fn compare(plan: &ExperimentPlan) -> Result<Comparison> {
    plan.validate()?;
    if plan.policies.len() < 2 {
        return Err(SimError::InvalidConfig(
            "a comparison needs at least two policies".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, &policy) in plan.policies.iter().enumerate() {
        let dup = plan.policies[..i].iter().filter(|&&p| p == policy).count();
        let label = if dup == 0 {
            policy.name().to_string()
        } else {
            format!("{}#{}", policy.name(), dup + 1)
        };
        let mut config = plan.base.clone();
        config.policy = policy;
        let row = match run_all(&config, &plan.seeds) {
            Ok(runs) => CompareRow {
                // a fresh stream per row: identical runs get identical intervals
                aggregate: Some(AggregateSummary::from_runs(
                    &runs,
                    &mut bootstrap_rng(&plan.seeds),
                )?),
                runs,
                label,
                policy,
                error: None,
            },
            Err(e) => CompareRow {
                label,
                policy,
                runs: Vec::new(),
                aggregate: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let key = |r: &CompareRow| {
        r.aggregate
            .as_ref()
            .map_or(f64::INFINITY, |a| plan.metric.interval(a).point)
    };
    rows.sort_by(|a, b| key(a).total_cmp(&key(b)));
    Ok(Comparison {
        metric: plan.metric,
        rows,
        single_seed: plan.seeds.len() == 1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub m: f64,
    pub r_threshold: Threshold,
    pub runs: Vec<RunSummary>,
    pub error: Option<String>,
}

impl SweepPoint {
    pub fn mean_of(&self, metric: Metric) -> Option<f64> {
        (self.error.is_none() && !self.runs.is_empty())
            .then(|| self.runs.iter().map(|s| metric.of(s)).sum::<f64>() / self.runs.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub metric: Metric,
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the lowest metric mean.
    pub best: Option<usize>,
}

#[derive(Serialize)]
struct SweepCsvRow {
    m: f64,
    r_threshold: String,
    mean_rt: Option<f64>,
    restart_fraction: Option<f64>,
    status: &'static str,
}

impl SweepResult {
    pub fn best_point(&self) -> Option<&SweepPoint> {
        self.best.map(|i| &self.points[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for p in &self.points {
            w.serialize(SweepCsvRow {
                m: p.m,
                r_threshold: p.r_threshold.to_string(),
                mean_rt: p.mean_of(Metric::MeanRt),
                restart_fraction: p.mean_of(Metric::RestartFraction),
                status: if p.error.is_some() { "FAIL" } else { "ok" },
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| SimError::io(path, e))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>6} {:>8} {:>10} {:>9}\n",
            "m", "r", "mean_rt", "restarts"
        );
        for (i, p) in self.points.iter().enumerate() {
            let mark = if Some(i) == self.best { " *" } else { "" };
            match (
                p.mean_of(Metric::MeanRt),
                p.mean_of(Metric::RestartFraction),
            ) {
                (Some(rt), Some(rf)) => {
                    let _ = writeln!(
                        out,
                        "{:>6} {:>8} {:>10.3} {:>9.3}{mark}",
                        p.m, p.r_threshold, rt, rf
                    );
                }
                _ => {
                    let _ = writeln!(
                        out,
                        "{:>6} {:>8} FAIL {}",
                        p.m,
                        p.r_threshold,
                        p.error.as_deref().unwrap_or("")
                    );
                }
            }
        }
        out
    }
}

/// Evaluates HRA at every (m, r_threshold) grid point on every seed. A
/// failing point is recorded and skipped.
pub fn sweep_hra(
    base: &RunConfig,
    grid: &[(f64, Threshold)],
    seeds: &[u64],
    metric: Metric,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(SimError::InvalidConfig("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(SimError::InvalidConfig(
            "sweep needs at least one seed".into(),
        ));
    }
    let points: Vec<SweepPoint> = grid
        .iter()
        .map(|&(m, r_threshold)| {
            let mut config = base.clone();
            config.policy = PolicyKind::Hra;
            config.hra = HraParams {
                m,
                r_threshold,
                ..base.hra.clone()
            };
            match run_all(&config, seeds) {
                Ok(runs) => SweepPoint {
                    m,
                    r_threshold,
                    runs,
                    error: None,
                },
                Err(e) => SweepPoint {
                    m,
                    r_threshold,
                    runs: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.mean_of(metric).map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(SweepResult {
        metric,
        points,
        best,
    })
}

/// Sets the offered rate of an open- or closed-loop workload.
pub fn with_qps(mut config: RunConfig, qps: f64) -> Result<RunConfig> {
    match &mut config.workload.mode {
        WorkloadMode::OpenLoop { target_qps } => *target_qps = qps,
        WorkloadMode::ClosedLoop { pacing_qps, .. } => *pacing_qps = Some(qps),
        other => {
            return Err(SimError::InvalidConfig(format!(
                "cannot set a rate on a {other:?} workload"
            )))
        }
    }
    Ok(config)
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub qps: f64,
    pub compliant: bool,
    /// Largest per-seed TTFT percentile, seconds.
    pub worst_ttft: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaxQpsResult {
    pub best: Option<f64>,
    /// Every evaluated point, ascending QPS.
    pub curve: Vec<CurvePoint>,
    /// Compliant points lying above a non-compliant one.
    pub non_monotone: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtftConstraint {
    /// One of 50, 90, 95, 99.
    pub percentile: u32,
    /// Seconds; may be infinite.
    pub limit: f64,
}

impl Default for TtftConstraint {
    fn default() -> Self {
        TtftConstraint {
            percentile: 90,
            limit: 1.5,
        }
    }
}

impl TtftConstraint {
    fn value(&self, s: &RunSummary) -> Result<f64> {
        Ok(match self.percentile {
            50 => s.ttft.p50,
            90 => s.ttft.p90,
            95 => s.ttft.p95,
            99 => s.ttft.p99,
            p => {
                return Err(SimError::InvalidConfig(format!(
                    "unsupported TTFT percentile {p}"
                )))
            }
        })
    }
}

/// Compliance of one rate: every seed must meet the constraint.
pub fn evaluate_qps(
    base: &RunConfig,
    seeds: &[u64],
    constraint: &TtftConstraint,
    qps: f64,
) -> Result<CurvePoint> {
    let runs = run_all(&with_qps(base.clone(), qps)?, seeds)?;
    let mut worst: f64 = 0.0;
    for s in &runs {
        worst = worst.max(constraint.value(s)?);
    }
    Ok(CurvePoint {
        qps,
        compliant: worst <= constraint.limit,
        worst_ttft: worst,
    })
}

fn flag_non_monotone(curve: &[CurvePoint]) -> Vec<f64> {
    let mut seen_violation = false;
    let mut out = Vec::new();
    for p in curve {
        if !p.compliant {
            seen_violation = true;
        } else if seen_violation {
            out.push(p.qps);
        }
    }
    out
}

/// Compliance at each listed rate, ascending.
pub fn compliance_curve(
    base: &RunConfig,
    seeds: &[u64],
    constraint: &TtftConstraint,
    rates: &[f64],
) -> Result<MaxQpsResult> {
    let mut curve = rates
        .iter()
        .map(|&q| evaluate_qps(base, seeds, constraint, q))
        .collect::<Result<Vec<_>>>()?;
    curve.sort_by(|a, b| a.qps.total_cmp(&b.qps));
    let best = curve
        .iter()
        .filter(|p| p.compliant)
        .map(|p| p.qps)
        .reduce(f64::max);
    Ok(MaxQpsResult {
        best,
        non_monotone: flag_non_monotone(&curve),
        curve,
    })
}

/// Largest compliant rate on the grid `qps_lo + k * step` within
/// `[qps_lo, qps_hi]`, by bisection. When a rate is returned below
/// `qps_hi`, the next grid point up was evaluated and found non-compliant.
pub fn max_qps(
    base: &RunConfig,
    seeds: &[u64],
    constraint: &TtftConstraint,
    qps_lo: f64,
    qps_hi: f64,
    step: f64,
) -> Result<MaxQpsResult> {
    if !(qps_lo > 0.0 && qps_hi > qps_lo && step > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "max-qps needs 0 < lo < hi and step > 0, got [{qps_lo}, {qps_hi}] step {step}"
        )));
    }
    let n = ((qps_hi - qps_lo) / step).round() as i64;
    let rate = |k: i64| {
        if k == n {
            qps_hi
        } else {
            qps_lo + k as f64 * step
        }
    };
    let mut curve = Vec::new();
    let mut eval = |k: i64| -> Result<bool> {
        let p = evaluate_qps(base, seeds, constraint, rate(k))?;
        let ok = p.compliant;
        curve.push(p);
        Ok(ok)
    };

    let best = if eval(n)? {
        Some(rate(n))
    } else if !eval(0)? {
        None
    } else {
        let (mut lo, mut hi) = (0, n);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(rate(lo))
    };
    curve.sort_by(|a, b| a.qps.total_cmp(&b.qps));
    Ok(MaxQpsResult {
        best,
        non_monotone: flag_non_monotone(&curve),
        curve,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalerRow {
    pub label: String,
    /// Mean over seeds.
    pub gpu_hours: f64,
    /// Worst per-seed p95 slowdown.
    pub p95_slowdown: f64,
    pub pass: bool,
    /// Relative to the first scaler; `None` for failing rows.
    pub savings_pct: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AutoscaleReport {
    pub slowdown_limit: f64,
    pub rows: Vec<ScalerRow>,
}

impl AutoscaleReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record([
            "scaler",
            "gpu_hours",
            "p95_slowdown",
            "status",
            "savings_pct",
        ])
        .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                format!("{:.6}", r.gpu_hours),
                format!("{:.6}", r.p95_slowdown),
                if r.pass { "PASS" } else { "FAIL" }.to_string(),
                r.savings_pct.map(|s| format!("{s:.3}")).unwrap_or_default(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| SimError::io(path, e))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<36} {:>10} {:>9} {:>6} {:>9}\n",
            "scaler", "gpu_hours", "p95_sd", "", "savings"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<36} {:>10.3} {:>9.3} {:>6} {:>9}",
                r.label,
                r.gpu_hours,
                r.p95_slowdown,
                if r.pass { "PASS" } else { "FAIL" },
                r.savings_pct
                    .map(|s| format!("{s:.1}%"))
                    .unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

/// GPU hours and p95 slowdown per controller. A controller passes when
/// every seed keeps p95 slowdown at or below `slowdown_limit`.
pub fn autoscale_report(
    base: &RunConfig,
    scalers: &[ScalerSpec],
    seeds: &[u64],
    slowdown_limit: f64,
) -> Result<AutoscaleReport> {
    if scalers.is_empty() {
        return Err(SimError::InvalidConfig("no autoscaler specs given".into()));
    }
    let mut rows: Vec<ScalerRow> = scalers
        .iter()
        .map(|spec| {
            let mut config = base.clone();
            config.autoscaler = Some(spec.clone());
            config.num_replicas = config
                .num_replicas
                .clamp(spec.min_replicas, spec.max_replicas);
            match run_all(&config, seeds) {
                Ok(runs) => {
                    let gpu_hours =
                        runs.iter().map(|s| s.gpu_hours).sum::<f64>() / runs.len() as f64;
                    let p95 = runs.iter().map(|s| s.slowdown.p95).fold(0.0, f64::max);
                    ScalerRow {
                        label: spec.label(),
                        gpu_hours,
                        p95_slowdown: p95,
                        pass: p95 <= slowdown_limit,
                        savings_pct: None,
                        error: None,
                    }
                }
                Err(e) => ScalerRow {
                    label: spec.label(),
                    gpu_hours: f64::NAN,
                    p95_slowdown: f64::NAN,
                    pass: false,
                    savings_pct: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let baseline = rows[0].gpu_hours;
    for r in &mut rows {
        if r.pass && baseline.is_finite() && baseline > 0.0 {
            r.savings_pct = Some((baseline - r.gpu_hours) / baseline * 100.0);
        }
    }
    Ok(AutoscaleReport {
        slowdown_limit,
        rows,
    })
}
