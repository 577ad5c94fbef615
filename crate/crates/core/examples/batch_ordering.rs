//! Arrival-order against shortest-prefill-first admission inside each
//! replica, under LLQ routing.
//!
//! `cargo run --release --example batch_ordering -- [num_seeds]`

use llmsim::benchmarks::heavy_tail;
use llmsim::harness;
use llmsim::metrics::mean;
use llmsim::replica::OrderMode;

fn main() -> llmsim::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("num_seeds"));
    let seeds: Vec<u64> = (0..n).collect();
    let mut base = heavy_tail(0);
    let mut results = Vec::new();
    for mode in [OrderMode::Arrival, OrderMode::ShortestPrefillFirst] {
        base.replica.order_mode = mode;
        let runs = harness::run_all(&base, &seeds)?;
        let rt = mean(&runs.iter().map(|s| s.mean_rt).collect::<Vec<_>>());
        println!("{mode:?}: mean RT {rt:.3}s over {n} seeds");
        results.push(rt);
    }
    println!("reduction: {:.1}%", 100.0 * (1.0 - results[1] / results[0]));
    Ok(())
}
