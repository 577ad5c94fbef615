//! Threshold and proportional autoscalers on a sinusoidal load. Reports
//! GPU hours and worst-seed p95 slowdown for each.
//!
//! `cargo run --release --example autoscaling -- [num_seeds]`

use llmsim::benchmarks::{proportional_scaler, sinusoidal, threshold_scaler};
use llmsim::harness;

fn main() -> llmsim::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(2, |s| s.parse().expect("num_seeds"));
    let seeds: Vec<u64> = (0..n).collect();
    let scalers = [threshold_scaler(1600.0, 900.0), proportional_scaler(70.0)];
    let report = harness::autoscale_report(&sinusoidal(0), &scalers, &seeds, 5.0)?;
    print!("{}", report.render());
    Ok(())
}
