//! Ready-made configurations for the standard experiments.
//!
//! All benchmarks use a GPU-like cost model in which the fixed iteration
//! cost dominates the per-sequence decode cost and prefill is comparatively
//! expensive, so KV-cache capacity rather than compute bounds the batch.

use crate::autoscale::{ScalerKind, ScalerSpec};
use crate::config::RunConfig;
use crate::replica::ExecutionModel;
use crate::routing::{HraParams, PolicyKind, Threshold};
use crate::workload::{Inflation, LengthDist, LengthSource, WorkloadMode};

pub const GPU_LIKE: ExecutionModel = ExecutionModel {
    c0: 0.015,
    c1: 1.5e-4,
    c2: 2.0e-4,
};

/// About 90% of the LLQ saturation throughput of [`heavy_tail`]
/// (~7.2 req/s measured with a 200-deep closed loop).
pub const HEAVY_TAIL_QPS: f64 = 6.5;

fn capped_lengths(max_tokens: u32) -> LengthSource {
    LengthSource::Synthetic {
        prompt: LengthDist {
            median: 128.0,
            sigma: 1.0,
            min: 1,
            max: max_tokens,
        },
        decode: LengthDist {
            median: 256.0,
            sigma: 1.0,
            min: 1,
            max: max_tokens,
        },
    }
}

/// Four replicas, bursty open-loop arrivals and 5%/10x inflation of
/// prompts and decodes. Base lengths are capped at 1024 so that a single
/// inflated request always fits in one replica's 2048 blocks.
pub fn heavy_tail(seed: u64) -> RunConfig {
    let mut c = RunConfig::new(4, 1000.0, HEAVY_TAIL_QPS);
    c.seed = seed;
    c.execution = GPU_LIKE;
    c.replica.num_blocks = 2048;
    c.workload.interarrival_sigma = 2.0;
    c.workload.lengths = capped_lengths(1024);
    c.workload.inflation = Inflation::heavy_tail();
    c
}

/// The (m, r_threshold) grid searched for HRA on [`heavy_tail`].
pub fn hra_grid() -> Vec<(f64, Threshold)> {
    let mut grid = Vec::new();
    for m in [0.0, 0.02, 0.05, 0.1, 0.2] {
        for r in [0.0, 4.0, 8.0] {
            grid.push((m, Threshold(r)));
        }
    }
    grid
}

pub fn with_hra(mut config: RunConfig, m: f64, r_threshold: Threshold) -> RunConfig {
    config.policy = PolicyKind::Hra;
    config.hra = HraParams {
        m,
        r_threshold,
        ..config.hra
    };
    config
}

/// Slow sinusoid between 7.5 and 22.5 QPS over two periods, with no length
/// inflation. Starts at the controllers' minimum size.
pub fn sinusoidal(seed: u64) -> RunConfig {
    let mut c = RunConfig::new(4, 2400.0, 15.0);
    c.seed = seed;
    c.execution = GPU_LIKE;
    c.replica.num_blocks = 2048;
    c.workload.mode = WorkloadMode::Sinusoidal {
        qps_low: 7.5,
        qps_high: 22.5,
        period: 1200.0,
    };
    c.workload.lengths = capped_lengths(1024);
    c
}

/// Throughput-threshold controller in the style of production autoscalers.
pub fn threshold_scaler(high: f64, low: f64) -> ScalerSpec {
    ScalerSpec {
        kind: ScalerKind::Threshold { high, low },
        tick_interval: 10.0,
        cooldown: 60.0,
        min_replicas: 4,
        max_replicas: 16,
        startup_delay: 0.0,
        name: None,
    }
}

/// Sizes the cluster to `ceil(inflight / target)`.
pub fn proportional_scaler(target_inflight_per_instance: f64) -> ScalerSpec {
    ScalerSpec {
        kind: ScalerKind::Proportional {
            target_inflight_per_instance,
        },
        tick_interval: 10.0,
        cooldown: 30.0,
        min_replicas: 4,
        max_replicas: 16,
        startup_delay: 0.0,
        name: None,
    }
}

/// Closed loop of 200 users with prompts about 70 times longer than
/// decodes; `pacing_qps` sets the offered rate. Release gaps are log-normal
/// with sigma 1, milder than the open-loop benchmarks.
pub fn prefill_heavy(seed: u64, pacing_qps: f64) -> RunConfig {
    let mut c = RunConfig::new(4, 300.0, pacing_qps);
    c.seed = seed;
    c.execution = GPU_LIKE;
    c.replica.num_blocks = 4096;
    c.workload.interarrival_sigma = 1.0;
    c.workload.mode = WorkloadMode::ClosedLoop {
        concurrency: 200,
        pacing_qps: Some(pacing_qps),
    };
    c.workload.lengths = LengthSource::Synthetic {
        prompt: LengthDist {
            median: 2100.0,
            sigma: 0.5,
            min: 16,
            max: 8192,
        },
        decode: LengthDist {
            median: 30.0,
            sigma: 0.5,
            min: 1,
            max: 256,
        },
    };
    c
}
