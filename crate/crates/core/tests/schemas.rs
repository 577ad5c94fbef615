//! Golden CSV headers and output-directory contents.

use std::path::Path;

use llmsim::benchmarks::proportional_scaler;
use llmsim::engine::{self, RunOptions, Simulation, Workload};
use llmsim::metrics::{emit_logs, results_dir, OUT_ROOT_ENV};
use llmsim::sim::SimTime;
use llmsim::workload::{save_trace, RequestTemplate};
use llmsim::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GS_LOG: &str =
    "time,replica_id,num_pending_requests,num_active_requests,num_allocated_blocks,num_blocks,memory_usage_percent";
const REQS_LOG: &str = "time,replica_id,request_id,num_prefill_tokens,num_decode_tokens";
const REQUEST_METRICS: &str = "request_id,request_arrived_at,request_e2e_time,request_num_restarts,ttft,tpot,scheduling_delay,replica_id,num_prefill_tokens,num_decode_tokens";
const SCALER_LOG: &str = "time,action,replica_id,live_count";
const CLUSTER_LOG: &str = "time,live_replicas,draining_replicas,queued_requests,inflight_requests";
const TRACE: &str = "arrived_at,num_prefill_tokens,num_decode_tokens";

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn one(at: f64) -> RequestTemplate {
    RequestTemplate {
        arrival_offset: SimTime::from_secs(at),
        num_prefill_tokens: 64,
        num_decode_tokens: 64,
    }
}

fn emit(config: &RunConfig, arrivals: Vec<RequestTemplate>, dir: &Path) {
    let policy = config
        .policy
        .build(&config.hra, ChaCha8Rng::seed_from_u64(0));
    let out = Simulation::new(
        config.clone(),
        Workload::Arrivals(arrivals),
        policy,
        RunOptions::default(),
    )
    .unwrap()
    .run()
    .unwrap();
    emit_logs(dir, config, &out.summary, &out.records, &out.logs).unwrap();
}

#[test]
fn headers_are_pinned() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::new(2, 60.0, 2.0);
    c.replica.num_blocks = 2048;
    c.log_interval = Some(10.0);
    c.autoscaler = Some(llmsim::autoscale::ScalerSpec {
        min_replicas: 1,
        max_replicas: 3,
        ..proportional_scaler(4.0)
    });
    let out = engine::run(&c).unwrap();
    emit_logs(tmp.path(), &c, &out.summary, &out.records, &out.logs).unwrap();
    for (file, header) in [
        ("gs_log.csv", GS_LOG),
        ("reqs_log.csv", REQS_LOG),
        ("request_metrics.csv", REQUEST_METRICS),
        ("scaler_log.csv", SCALER_LOG),
        ("cluster_log.csv", CLUSTER_LOG),
    ] {
        let l = lines(&tmp.path().join(file));
        assert_eq!(l[0], header, "{file}");
        assert!(l.len() > 1, "{file} has no rows");
        let width = header.split(',').count();
        assert!(
            l.iter().all(|row| row.split(',').count() == width),
            "{file}"
        );
    }
    // one row per completed request, which is every arrival when draining
    assert_eq!(
        lines(&tmp.path().join("request_metrics.csv")).len() - 1,
        out.arrived as usize
    );
    assert_eq!(
        lines(&tmp.path().join("reqs_log.csv")).len() - 1,
        out.arrived as usize
    );
}

#[test]
fn zero_request_run_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    emit(&RunConfig::new(2, 10.0, 1.0), Vec::new(), tmp.path());
    for (file, header) in [
        ("gs_log.csv", GS_LOG),
        ("reqs_log.csv", REQS_LOG),
        ("request_metrics.csv", REQUEST_METRICS),
    ] {
        assert_eq!(
            lines(&tmp.path().join(file)),
            vec![header.to_string()],
            "{file}"
        );
    }
    assert!(!tmp.path().join("scaler_log.csv").exists());
    assert!(!tmp.path().join("cluster_log.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["num_requests"], 0);
}

#[test]
fn four_replicas_one_schedule_call_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::new(4, 0.6, 1.0);
    c.drain = false;
    emit(&c, vec![one(0.5)], tmp.path());
    let gs = lines(&tmp.path().join("gs_log.csv"));
    assert_eq!(gs.len(), 5);
    let ids: Vec<&str> = gs[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ids, ["0", "1", "2", "3"]);
    assert!(gs[1..].iter().all(|r| r.starts_with("0.500000,")));
}

#[test]
fn memory_usage_is_a_percentage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = RunConfig::new(1, 1.0, 1.0);
    c.replica.num_blocks = 8;
    c.drain = false;
    // the second arrival sees the first one's 4 prompt blocks
    emit(&c, vec![one(0.0), one(0.001)], tmp.path());
    let gs = lines(&tmp.path().join("gs_log.csv"));
    assert_eq!(gs[2], "0.001000,0,0,1,4,8,50.00");
}

#[test]
fn config_json_keys_mirror_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let c = RunConfig::new(2, 10.0, 1.0);
    let out = engine::run(&c).unwrap();
    emit_logs(tmp.path(), &c, &out.summary, &out.records, &out.logs).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("config.json")).unwrap())
            .unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "autoscaler",
            "drain",
            "duration",
            "execution",
            "hra",
            "log_interval",
            "max_events",
            "num_replicas",
            "output_dir",
            "policy",
            "replica",
            "seed",
            "workload"
        ]
    );
    assert_eq!(RunConfig::load(tmp.path().join("config.json")).unwrap(), c);
}

#[test]
fn trace_files_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.csv");
    let templates = vec![one(0.25), one(1.5)];
    save_trace(&templates, &path).unwrap();
    assert_eq!(lines(&path)[0], TRACE);
    assert_eq!(llmsim::workload::load_trace(&path).unwrap(), templates);
}

#[test]
fn results_dir_layout() {
    // the only test touching the variable
    std::env::set_var(OUT_ROOT_ENV, "/tmp/somewhere");
    let dir = results_dir("sharegpt_llq_7.5");
    std::env::remove_var(OUT_ROOT_ENV);
    let parent = dir.parent().unwrap();
    assert_eq!(parent, Path::new("/tmp/somewhere/sharegpt_llq_7.5"));
    let stamp = dir.file_name().unwrap().to_str().unwrap();
    // YYYY-MM-DD_HH-MM-SS-micro
    assert_eq!(stamp.len(), 26, "{stamp}");
    let b = stamp.as_bytes();
    assert_eq!(
        (b[4], b[7], b[10], b[13], b[16], b[19]),
        (b'-', b'-', b'_', b'-', b'-', b'-')
    );
    assert!(stamp.chars().filter(char::is_ascii_digit).count() == 20);
    assert!(results_dir("x").starts_with("simulator_results"));
}
