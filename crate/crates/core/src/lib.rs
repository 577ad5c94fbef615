//! Discrete-event simulator for a multi-replica LLM serving cluster.
//!
//! Each replica runs a chunked-prefill continuous-batching scheduler over a
//! paged KV-cache; a pluggable global policy routes arriving requests; an
//! optional autoscaler resizes the cluster. Runs are deterministic per seed.
//!
//! ```no_run
//! use llmsim::{config::RunConfig, engine};
//!
//! let config = RunConfig::new(4, 600.0, 5.0);
//! let out = engine::run(&config).unwrap();
//! println!("mean RT {:.2}s", out.summary.mean_rt);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoscale;
pub mod benchmarks;
pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod replica;
pub mod report;
pub mod routing;
pub mod sim;
pub mod workload;

pub use config::RunConfig;
pub use engine::{run, RunOutput};
pub use error::{Result, SimError};
