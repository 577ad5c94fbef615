//! Largest pacing rate of the prefill-heavy closed loop whose p90 TTFT stays
//! under 1.5 s in every seed.
//!
//! `cargo run --release --example max_qps_search -- [num_seeds]`

use llmsim::benchmarks::prefill_heavy;
use llmsim::harness::{self, TtftConstraint};

fn main() -> llmsim::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(3, |s| s.parse().expect("num_seeds"));
    let seeds: Vec<u64> = (0..n).collect();
    let result = harness::max_qps(
        &prefill_heavy(0, 1.0),
        &seeds,
        &TtftConstraint::default(),
        1.0,
        12.0,
        0.25,
    )?;
    for p in &result.curve {
        println!(
            "{:>6.2} qps  worst p90 TTFT {:>7.3}s  {}",
            p.qps,
            p.worst_ttft,
            if p.compliant { "ok" } else { "-" }
        );
    }
    match result.best {
        Some(q) => println!("max compliant: {q} qps"),
        None => println!("no compliant rate in range"),
    }
    Ok(())
}
