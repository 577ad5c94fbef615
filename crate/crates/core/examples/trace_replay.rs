//! Writes a short synthetic trace to disk, replays it, and prints the
//! first few engine events.
//!
//! `cargo run --release --example trace_replay`

use llmsim::engine::{self, RunOptions};
use llmsim::sim::{SimRng, SimTime};
use llmsim::workload::{save_trace, RequestTemplate, WorkloadMode};
use llmsim::RunConfig;
use rand::Rng;

fn main() -> llmsim::Result<()> {
    let dir = std::env::temp_dir().join("llmsim_trace_replay");
    std::fs::create_dir_all(&dir).map_err(|e| llmsim::SimError::io(&dir, e))?;
    let path = dir.join("trace.csv");

    let mut rng = SimRng::new(7);
    let rng = rng.stream(llmsim::sim::Substream::Arrivals);
    let mut t = 0.0;
    let templates: Vec<RequestTemplate> = (0..20)
        .map(|_| {
            t += rng.random_range(0.05..0.5);
            RequestTemplate {
                arrival_offset: SimTime::from_secs(t),
                num_prefill_tokens: rng.random_range(16..512),
                num_decode_tokens: rng.random_range(1..256),
            }
        })
        .collect();
    save_trace(&templates, &path)?;

    let mut config = RunConfig::new(2, 60.0, 1.0);
    config.workload.mode = WorkloadMode::Trace { path: path.clone() };
    let out = engine::run_with_options(
        &config,
        RunOptions {
            logs: true,
            trace: true,
        },
    )?;

    println!(
        "replayed {} requests from {}",
        out.summary.num_requests,
        path.display()
    );
    for ev in out.trace.iter().take(12) {
        println!("{}", serde_json::to_string(ev).expect("event serializes"));
    }
    println!(
        "... {} events total, mean RT {:.3}s",
        out.trace.len(),
        out.summary.mean_rt
    );
    Ok(())
}
