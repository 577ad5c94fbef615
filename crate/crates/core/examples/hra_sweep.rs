//! Grid search of HRA's margin and ratio threshold on the heavy-tailed
//! benchmark, scored by mean response time.
//!
//! `cargo run --release --example hra_sweep -- [num_seeds]`

use llmsim::benchmarks::{heavy_tail, hra_grid};
use llmsim::harness::{self, Metric};

fn main() -> llmsim::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(3, |s| s.parse().expect("num_seeds"));
    let seeds: Vec<u64> = (0..n).collect();
    let result = harness::sweep_hra(&heavy_tail(0), &hra_grid(), &seeds, Metric::MeanRt)?;
    print!("{}", result.render());
    if let Some(p) = result.best_point() {
        println!("best: m={} r_threshold={}", p.m, p.r_threshold);
    }
    Ok(())
}
