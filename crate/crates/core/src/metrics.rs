//! Per-request records, run summaries, multi-seed aggregation and the CSV
//! log files a run leaves behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoscale::{ScalerLogRow, SCALER_LOG_HEADER};
use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::replica::{ExecutionModel, ReplicaId, Request};
use crate::workload::RequestId;

pub const GS_LOG_HEADER: &str =
    "time,replica_id,num_pending_requests,num_active_requests,num_allocated_blocks,num_blocks,memory_usage_percent";
pub const REQS_LOG_HEADER: &str = "time,replica_id,request_id,num_prefill_tokens,num_decode_tokens";
pub const REQUEST_METRICS_HEADER: &str = "request_id,request_arrived_at,request_e2e_time,request_num_restarts,ttft,tpot,scheduling_delay,replica_id,num_prefill_tokens,num_decode_tokens";
/// Overrides the `simulator_results` root directory.
pub const OUT_ROOT_ENV: &str = "LLMSIM_OUT_ROOT";

/// `<root>/<experiment>/<YYYY-MM-DD_HH-MM-SS-micro>/`, not yet created.
pub fn results_dir(experiment: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("simulator_results"));
    let stamp = chrono::Local::now().format("%Y-%m-%d_%H-%M-%S-%6f");
    root.join(experiment).join(stamp.to_string())
}

pub const CLUSTER_LOG_HEADER: &str =
    "time,live_replicas,draining_replicas,queued_requests,inflight_requests";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub request_arrived_at: f64,
    pub request_e2e_time: f64,
    pub request_num_restarts: u32,
    pub ttft: f64,
    pub tpot: f64,
    pub scheduling_delay: f64,
    pub replica_id: ReplicaId,
    pub num_prefill_tokens: u32,
    pub num_decode_tokens: u32,
    /// Completion time alone on an idle replica; not written to CSV.
    #[serde(skip)]
    pub ideal_rt: f64,
}

impl RequestRecord {
    /// Builds the record of a completed request.
    pub fn from_completed(r: &Request, model: &ExecutionModel, chunk_size: u32) -> Self {
        let completed = r.completed_at.expect("request not completed");
        let first_token = r
            .first_token_at
            .expect("completed request without first token");
        let e2e = completed - r.arrived_at;
        let tpot = if r.original_decode_tokens <= 1 {
            0.0
        } else {
            (completed - first_token) / r.original_decode_tokens as f64
        };
        RequestRecord {
            request_id: r.id,
            request_arrived_at: r.arrived_at.as_secs(),
            request_e2e_time: e2e,
            request_num_restarts: r.num_restarts,
            ttft: first_token - r.arrived_at,
            tpot,
            scheduling_delay: r.first_admitted_at.map(|t| t - r.arrived_at).unwrap_or(0.0),
            replica_id: r.replica_id.unwrap_or(0),
            num_prefill_tokens: r.original_prefill_tokens,
            num_decode_tokens: r.original_decode_tokens,
            ideal_rt: model.ideal_rt(
                r.original_prefill_tokens,
                r.original_decode_tokens,
                chunk_size,
            ),
        }
    }
}

pub fn slowdown(rt: f64, ideal_rt: f64) -> Result<f64> {
    if !(ideal_rt > 0.0) {
        return Err(SimError::Stats(format!(
            "ideal response time {ideal_rt} not positive"
        )));
    }
    Ok(rt / ideal_rt)
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Percentiles {
            p50: quantile_sorted(&v, 0.50),
            p90: quantile_sorted(&v, 0.90),
            p95: quantile_sorted(&v, 0.95),
            p99: quantile_sorted(&v, 0.99),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSplit {
    pub mean_rt_restarted: Option<f64>,
    pub mean_rt_not_restarted: Option<f64>,
    pub fraction_restarted: f64,
}

pub fn restart_split(records: &[RequestRecord]) -> Result<RestartSplit> {
    if records.is_empty() {
        return Err(SimError::Stats("restart split of no records".into()));
    }
    let (restarted, clean): (Vec<&RequestRecord>, Vec<&RequestRecord>) =
        records.iter().partition(|r| r.request_num_restarts > 0);
    let mean_of = |rs: &[&RequestRecord]| {
        (!rs.is_empty())
            .then(|| rs.iter().map(|r| r.request_e2e_time).sum::<f64>() / rs.len() as f64)
    };
    Ok(RestartSplit {
        mean_rt_restarted: mean_of(&restarted),
        mean_rt_not_restarted: mean_of(&clean),
        fraction_restarted: restarted.len() as f64 / records.len() as f64,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub num_requests: usize,
    /// Arrived but not finished when the run stopped (draining disabled).
    pub unfinished: usize,
    pub mean_rt: f64,
    pub rt: Percentiles,
    pub ttft: Percentiles,
    pub mean_tpot: f64,
    pub restart_fraction: f64,
    pub mean_rt_restarted: Option<f64>,
    pub mean_rt_not_restarted: Option<f64>,
    pub mean_scheduling_delay: f64,
    pub mean_slowdown: f64,
    pub slowdown: Percentiles,
    pub num_evictions: u64,
    pub gpu_hours: f64,
    pub end_time: f64,
    pub num_events: u64,
}

impl RunSummary {
    pub fn from_records(records: &[RequestRecord]) -> Self {
        let col = |f: fn(&RequestRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let rts = col(|r| r.request_e2e_time);
        let slowdowns: Vec<f64> = records
            .iter()
            .map(|r| slowdown(r.request_e2e_time, r.ideal_rt).unwrap_or(f64::NAN))
            .collect();
        let split = restart_split(records).ok();
        RunSummary {
            num_requests: records.len(),
            mean_rt: mean(&rts),
            rt: Percentiles::of(&rts),
            ttft: Percentiles::of(&col(|r| r.ttft)),
            mean_tpot: mean(&col(|r| r.tpot)),
            restart_fraction: split.map(|s| s.fraction_restarted).unwrap_or(0.0),
            mean_rt_restarted: split.and_then(|s| s.mean_rt_restarted),
            mean_rt_not_restarted: split.and_then(|s| s.mean_rt_not_restarted),
            mean_scheduling_delay: mean(&col(|r| r.scheduling_delay)),
            mean_slowdown: mean(&slowdowns),
            slowdown: Percentiles::of(&slowdowns),
            ..RunSummary::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub point: f64,
    pub hi: f64,
}

/// Percentile-bootstrap interval of the mean.
///
/// The interval is widened to include the point estimate if resampling
/// leaves it outside.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConfidenceInterval> {
    if values.len() < 2 {
        return Err(SimError::Stats(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(SimError::Stats(format!(
            "bad bootstrap level {level} / resamples {resamples}"
        )));
    }
    let point = mean(values);
    if values.iter().all(|&v| v == values[0]) {
        return Ok(ConfidenceInterval {
            lo: values[0],
            point: values[0],
            hi: values[0],
        });
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ConfidenceInterval {
        lo: quantile_sorted(&means, tail).min(point),
        point,
        hi: quantile_sorted(&means, 1.0 - tail).max(point),
    })
}

pub const DEFAULT_CI_LEVEL: f64 = 0.90;
pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Point estimate and 90% interval per metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub seeds: usize,
    /// True when only one seed ran and every interval is a point.
    pub degenerate: bool,
    pub mean_rt: ConfidenceInterval,
    pub rt_p95: ConfidenceInterval,
    pub ttft_p90: ConfidenceInterval,
    pub restart_fraction: ConfidenceInterval,
    pub slowdown_p95: ConfidenceInterval,
    pub gpu_hours: ConfidenceInterval,
}

impl AggregateSummary {
    pub fn from_runs(runs: &[RunSummary], rng: &mut ChaCha8Rng) -> Result<Self> {
        if runs.is_empty() {
            return Err(SimError::Stats("no runs to aggregate".into()));
        }
        let mut ci = |f: fn(&RunSummary) -> f64| -> Result<ConfidenceInterval> {
            let v: Vec<f64> = runs.iter().map(f).collect();
            if v.len() == 1 {
                return Ok(ConfidenceInterval {
                    lo: v[0],
                    point: v[0],
                    hi: v[0],
                });
            }
            bootstrap_ci(&v, DEFAULT_CI_LEVEL, DEFAULT_RESAMPLES, rng)
        };
        Ok(AggregateSummary {
            seeds: runs.len(),
            degenerate: runs.len() == 1,
            mean_rt: ci(|s| s.mean_rt)?,
            rt_p95: ci(|s| s.rt.p95)?,
            ttft_p90: ci(|s| s.ttft.p90)?,
            restart_fraction: ci(|s| s.restart_fraction)?,
            slowdown_p95: ci(|s| s.slowdown.p95)?,
            gpu_hours: ci(|s| s.gpu_hours)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsLogRow {
    pub time: f64,
    pub replica_id: ReplicaId,
    pub num_pending_requests: usize,
    pub num_active_requests: usize,
    pub num_allocated_blocks: u64,
    pub num_blocks: u64,
}

impl GsLogRow {
    pub fn memory_usage_percent(&self) -> f64 {
        self.num_allocated_blocks as f64 / self.num_blocks as f64 * 100.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReqsLogRow {
    pub time: f64,
    pub replica_id: ReplicaId,
    pub request_id: RequestId,
    pub num_prefill_tokens: u32,
    pub num_decode_tokens: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLogRow {
    pub time: f64,
    pub live_replicas: usize,
    pub draining_replicas: usize,
    pub queued_requests: usize,
    pub inflight_requests: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunLogs {
    pub gs_log: Vec<GsLogRow>,
    pub reqs_log: Vec<ReqsLogRow>,
    pub scaler_log: Vec<ScalerLogRow>,
    pub cluster_log: Vec<ClusterLogRow>,
}

fn write_csv<T>(
    dir: &Path,
    name: &str,
    header: &str,
    rows: &[T],
    mut line: impl FnMut(&mut BufWriter<File>, &T) -> std::io::Result<()>,
) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| SimError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        writeln!(w, "{header}")?;
        for row in rows {
            line(&mut w, row)?;
        }
        w.flush()
    })();
    res.map_err(|e| SimError::io(&path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SimError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| SimError::io(path, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn emit_logs(
    dir: &Path,
    config: &RunConfig,
    summary: &RunSummary,
    records: &[RequestRecord],
    logs: &RunLogs,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    write_csv(dir, "gs_log.csv", GS_LOG_HEADER, &logs.gs_log, |w, r| {
        writeln!(
            w,
            "{:.6},{},{},{},{},{},{:.2}",
            r.time,
            r.replica_id,
            r.num_pending_requests,
            r.num_active_requests,
            r.num_allocated_blocks,
            r.num_blocks,
            r.memory_usage_percent()
        )
    })?;
    write_csv(
        dir,
        "reqs_log.csv",
        REQS_LOG_HEADER,
        &logs.reqs_log,
        |w, r| {
            writeln!(
                w,
                "{:.6},{},{},{},{}",
                r.time, r.replica_id, r.request_id, r.num_prefill_tokens, r.num_decode_tokens
            )
        },
    )?;
    write_csv(
        dir,
        "request_metrics.csv",
        REQUEST_METRICS_HEADER,
        records,
        |w, r| {
            writeln!(
                w,
                "{},{:.6},{:.6},{},{:.6},{:.6},{:.6},{},{},{}",
                r.request_id,
                r.request_arrived_at,
                r.request_e2e_time,
                r.request_num_restarts,
                r.ttft,
                r.tpot,
                r.scheduling_delay,
                r.replica_id,
                r.num_prefill_tokens,
                r.num_decode_tokens
            )
        },
    )?;
    if config.autoscaler.is_some() {
        write_csv(
            dir,
            "scaler_log.csv",
            SCALER_LOG_HEADER,
            &logs.scaler_log,
            |w, r| {
                writeln!(
                    w,
                    "{:.6},{},{},{}",
                    r.time, r.action, r.replica_id, r.live_count
                )
            },
        )?;
    }
    if config.log_interval.is_some() {
        write_csv(
            dir,
            "cluster_log.csv",
            CLUSTER_LOG_HEADER,
            &logs.cluster_log,
            |w, r| {
                writeln!(
                    w,
                    "{:.6},{},{},{},{}",
                    r.time,
                    r.live_replicas,
                    r.draining_replicas,
                    r.queued_requests,
                    r.inflight_requests
                )
            },
        )?;
    }
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("summary.json"), summary)
}
