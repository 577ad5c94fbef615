//! LLQ against tuned HRA on the heavy-tailed benchmark, with 90% bootstrap
//! intervals over seeds.
//!
//! `cargo run --release --example policy_comparison -- [num_seeds]`

use llmsim::benchmarks::{heavy_tail, with_hra};
use llmsim::harness::{self, ExperimentPlan, Metric};
use llmsim::routing::{PolicyKind, Threshold};

fn main() -> llmsim::Result<()> {
    let n: u64 = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("num_seeds"));
    let base = with_hra(heavy_tail(0), 0.02, Threshold(0.0));

    let mut plan = ExperimentPlan::new("heavy_tail", base);
    plan.policies = vec![PolicyKind::Llq, PolicyKind::Hra];
    plan.seeds = (0..n).collect();

    for metric in [Metric::MeanRt, Metric::RestartFraction] {
        plan.metric = metric;
        let table = harness::compare(&plan)?;
        println!("{metric:?}");
        print!("{}", table.render());
        println!();
    }
    Ok(())
}
