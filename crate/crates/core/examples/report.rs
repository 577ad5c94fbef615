//! Runs LLQ and HRA on one heavy-tailed seed, writes both run directories,
//! then renders histograms, memory curves and restart counts from them.
//!
//! `cargo run --release --example report -- [out_dir]`

use std::path::PathBuf;

use llmsim::benchmarks::{heavy_tail, with_hra};
use llmsim::engine;
use llmsim::metrics::emit_logs;
use llmsim::report::build_report;
use llmsim::routing::Threshold;

fn main() -> llmsim::Result<()> {
    let root: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("llmsim_report"), PathBuf::from);

    let llq = heavy_tail(0);
    let hra = with_hra(heavy_tail(0), 0.02, Threshold(0.0));
    let mut dirs = Vec::new();
    for (name, config) in [("llq", llq), ("hra", hra)] {
        let out = engine::run(&config)?;
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| llmsim::SimError::io(&dir, e))?;
        emit_logs(&dir, &config, &out.summary, &out.records, &out.logs)?;
        dirs.push(dir);
    }
    let report = build_report(&dirs, &root.join("report"))?;
    for f in &report.files {
        println!("{}", f.display());
    }
    Ok(())
}
