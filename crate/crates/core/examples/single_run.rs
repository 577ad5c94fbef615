//! One simulation with the default configuration, summary printed as JSON.
//!
//! `cargo run --release --example single_run -- [qps] [policy]`

use llmsim::{engine, RunConfig};

fn main() -> llmsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let qps: f64 = args.next().map_or(4.0, |s| s.parse().expect("qps"));
    let mut config = RunConfig::new(4, 600.0, qps);
    if let Some(p) = args.next() {
        config.policy = p.parse().expect("policy");
    }
    let t = std::time::Instant::now();
    let out = engine::run(&config)?;
    println!("{}", serde_json::to_string_pretty(&out.summary).unwrap());
    eprintln!("wall {:.2?}", t.elapsed());
    Ok(())
}
