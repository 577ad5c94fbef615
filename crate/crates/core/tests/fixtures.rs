//! Small scenarios whose full event traces were worked out by hand.
//!
//! Every fixture uses `c0 = 1`, `c1 = 1/16`, `c2 = 1/4` and 16-token blocks,
//! so iteration latencies are exact binary fractions and times compare with
//! `==`.

use llmsim::engine::{RunOptions, RunOutput, Simulation, TraceEvent, Workload};
use llmsim::replica::{ExecutionModel, ReplicaConfig, ReplicaEngine, Request};
use llmsim::routing::{HraParams, PolicyKind, Threshold};
use llmsim::sim::SimTime;
use llmsim::workload::RequestTemplate;
use llmsim::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use TraceEvent::*;

const MODEL: ExecutionModel = ExecutionModel {
    c0: 1.0,
    c1: 0.0625,
    c2: 0.25,
};

fn req(at: f64, prefill: u32, decode: u32) -> RequestTemplate {
    RequestTemplate {
        arrival_offset: SimTime::from_secs(at),
        num_prefill_tokens: prefill,
        num_decode_tokens: decode,
    }
}

fn config(replicas: usize, blocks: u64) -> RunConfig {
    let mut c = RunConfig::new(replicas, 100.0, 1.0);
    c.execution = MODEL;
    c.replica = ReplicaConfig {
        num_blocks: blocks,
        ..ReplicaConfig::default()
    };
    c
}

fn simulate(config: RunConfig, arrivals: Vec<RequestTemplate>) -> RunOutput {
    let policy = config
        .policy
        .build(&config.hra, ChaCha8Rng::seed_from_u64(0));
    let options = RunOptions {
        logs: true,
        trace: true,
    };
    Simulation::new(config, Workload::Arrivals(arrivals), policy, options)
        .unwrap()
        .run()
        .unwrap()
}

fn batch(time: f64, replica: u32, decode: &[u64], prefill: &[(u64, u32)], ends: f64) -> TraceEvent {
    Batch {
        time,
        replica,
        decode: decode.to_vec(),
        prefill: prefill.to_vec(),
        ends,
    }
}

fn assert_trace(got: &[TraceEvent], want: &[TraceEvent]) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert_eq!(g, w, "trace diverges at event {i}");
    }
    assert_eq!(got.len(), want.len(), "trace length");
}

#[test]
pub fn lone_request_prefill_then_decode() {
    let out = simulate(config(1, 32), vec![req(0.0, 16, 2)]);
    assert_trace(
        &out.trace,
        &[
            Arrive {
                time: 0.0,
                request: 0,
            },
            Dispatch {
                time: 0.0,
                replica: 0,
                request: 0,
            },
            batch(0.0, 0, &[], &[(0, 16)], 2.0),
            FirstToken {
                time: 2.0,
                request: 0,
            },
            batch(2.0, 0, &[0], &[], 3.25),
            batch(3.25, 0, &[0], &[], 4.5),
            Complete {
                time: 4.5,
                replica: 0,
                request: 0,
            },
        ],
    );
    let r = &out.records[0];
    assert_eq!(r.ttft, 2.0);
    assert_eq!(r.request_e2e_time, 4.5);
    // 2 decode tokens over the 2.5 s after the first token
    assert_eq!(r.tpot, 1.25);
    assert_eq!(r.ideal_rt, 4.5);
}

#[test]
pub fn llq_alternates_and_batches_decode_with_prefill() {
    let out = simulate(
        config(2, 32),
        vec![req(0.0, 16, 1), req(0.5, 32, 1), req(1.0, 16, 1)],
    );
    assert_trace(
        &out.trace,
        &[
            Arrive {
                time: 0.0,
                request: 0,
            },
            Dispatch {
                time: 0.0,
                replica: 0,
                request: 0,
            },
            batch(0.0, 0, &[], &[(0, 16)], 2.0),
            Arrive {
                time: 0.5,
                request: 1,
            },
            Dispatch {
                time: 0.5,
                replica: 1,
                request: 1,
            },
            batch(0.5, 1, &[], &[(1, 32)], 3.5),
            // equal loads, lowest id wins; replica 0 is busy so it waits
            Arrive {
                time: 1.0,
                request: 2,
            },
            Dispatch {
                time: 1.0,
                replica: 0,
                request: 2,
            },
            FirstToken {
                time: 2.0,
                request: 0,
            },
            batch(2.0, 0, &[0], &[(2, 16)], 4.25),
            FirstToken {
                time: 3.5,
                request: 1,
            },
            batch(3.5, 1, &[1], &[], 4.75),
            FirstToken {
                time: 4.25,
                request: 2,
            },
            Complete {
                time: 4.25,
                replica: 0,
                request: 0,
            },
            batch(4.25, 0, &[2], &[], 5.5),
            Complete {
                time: 4.75,
                replica: 1,
                request: 1,
            },
            Complete {
                time: 5.5,
                replica: 0,
                request: 2,
            },
        ],
    );
    let delay: Vec<f64> = out.records.iter().map(|r| r.scheduling_delay).collect();
    assert_eq!(delay, vec![0.0, 0.0, 1.0]);
}

#[test]
pub fn decode_phase_eviction_folds_progress_into_prefill() {
    // 3 blocks: request 0 needs a third block at its 33rd token while
    // request 1 (younger) holds the last free one.
    let out = simulate(config(1, 3), vec![req(0.0, 31, 4), req(0.5, 15, 4)]);
    assert_trace(
        &out.trace,
        &[
            Arrive {
                time: 0.0,
                request: 0,
            },
            Dispatch {
                time: 0.0,
                replica: 0,
                request: 0,
            },
            batch(0.0, 0, &[], &[(0, 31)], 2.9375),
            Arrive {
                time: 0.5,
                request: 1,
            },
            Dispatch {
                time: 0.5,
                replica: 0,
                request: 1,
            },
            FirstToken {
                time: 2.9375,
                request: 0,
            },
            batch(2.9375, 0, &[0], &[(1, 15)], 5.125),
            FirstToken {
                time: 5.125,
                request: 1,
            },
            batch(5.125, 0, &[0, 1], &[], 6.625),
            Evict {
                time: 6.625,
                replica: 0,
                request: 1,
            },
            batch(6.625, 0, &[0], &[], 7.875),
            batch(7.875, 0, &[0], &[], 9.125),
            Complete {
                time: 9.125,
                replica: 0,
                request: 0,
            },
            // 15 prompt + 1 decoded token: the restart prefills 16
            batch(9.125, 0, &[], &[(1, 16)], 11.125),
            batch(11.125, 0, &[1], &[], 12.375),
            batch(12.375, 0, &[1], &[], 13.625),
            batch(13.625, 0, &[1], &[], 14.875),
            Complete {
                time: 14.875,
                replica: 0,
                request: 1,
            },
        ],
    );
    let r1 = out.records.iter().find(|r| r.request_id == 1).unwrap();
    assert_eq!(r1.request_num_restarts, 1);
    assert_eq!((r1.num_prefill_tokens, r1.num_decode_tokens), (15, 4));
    // first token survives the restart
    assert_eq!(r1.ttft, 5.125 - 0.5);
    assert_eq!(out.summary.num_evictions, 1);
}

#[test]
pub fn hra_holds_until_a_replica_has_headroom() {
    let mut c = config(2, 4);
    c.policy = PolicyKind::Hra;
    c.hra = HraParams {
        m: 0.0,
        r_threshold: Threshold(0.5),
        ..HraParams::default()
    };
    // r_hat starts at 1: forecasts are 2 blocks for 16 tokens, 4 for 32
    let out = simulate(c, vec![req(0.0, 16, 1), req(0.125, 32, 1), req(0.5, 32, 1)]);
    assert_trace(
        &out.trace,
        &[
            Arrive {
                time: 0.0,
                request: 0,
            },
            Dispatch {
                time: 0.0,
                replica: 0,
                request: 0,
            },
            batch(0.0, 0, &[], &[(0, 16)], 2.0),
            Arrive {
                time: 0.125,
                request: 1,
            },
            Dispatch {
                time: 0.125,
                replica: 1,
                request: 1,
            },
            batch(0.125, 1, &[], &[(1, 32)], 3.125),
            // 3 and 2 free blocks, 4 needed: held
            Arrive {
                time: 0.5,
                request: 2,
            },
            FirstToken {
                time: 2.0,
                request: 0,
            },
            batch(2.0, 0, &[0], &[], 3.25),
            FirstToken {
                time: 3.125,
                request: 1,
            },
            batch(3.125, 1, &[1], &[], 4.375),
            Complete {
                time: 3.25,
                replica: 0,
                request: 0,
            },
            Dispatch {
                time: 3.25,
                replica: 0,
                request: 2,
            },
            batch(3.25, 0, &[], &[(2, 32)], 6.25),
            Complete {
                time: 4.375,
                replica: 1,
                request: 1,
            },
            FirstToken {
                time: 6.25,
                request: 2,
            },
            batch(6.25, 0, &[2], &[], 7.5),
            Complete {
                time: 7.5,
                replica: 0,
                request: 2,
            },
        ],
    );
}

#[test]
pub fn chunked_prefill_of_1500_tokens() {
    // 1500 tokens need ceil(1500 / 16) = 94 blocks, more than 32; this is
    // the one fixture with a larger pool.
    let mut c = config(1, 100);
    c.replica.chunk_size_tokens = 512;
    let out = simulate(c, vec![req(0.0, 1500, 6)]);
    assert_trace(
        &out.trace,
        &[
            Arrive {
                time: 0.0,
                request: 0,
            },
            Dispatch {
                time: 0.0,
                replica: 0,
                request: 0,
            },
            batch(0.0, 0, &[], &[(0, 512)], 33.0),
            batch(33.0, 0, &[], &[(0, 512)], 66.0),
            batch(66.0, 0, &[], &[(0, 476)], 96.75),
            FirstToken {
                time: 96.75,
                request: 0,
            },
            batch(96.75, 0, &[0], &[], 98.0),
            batch(98.0, 0, &[0], &[], 99.25),
            batch(99.25, 0, &[0], &[], 100.5),
            batch(100.5, 0, &[0], &[], 101.75),
            batch(101.75, 0, &[0], &[], 103.0),
            batch(103.0, 0, &[0], &[], 104.25),
            Complete {
                time: 104.25,
                replica: 0,
                request: 0,
            },
        ],
    );
    assert_eq!(out.records[0].ideal_rt, 104.25);
}

#[test]
pub fn block_growth_from_94_to_95_at_token_1505() {
    let mut engine = ReplicaEngine::new(
        0,
        ReplicaConfig {
            num_blocks: 100,
            ..ReplicaConfig::default()
        },
    );
    engine
        .dispatch(Request::new(7, SimTime::ZERO, &req(0.0, 1500, 8)))
        .unwrap();
    let mut now = 0.0;
    let mut held = Vec::new();
    while !engine.is_empty() {
        engine.form_iteration(SimTime::from_secs(now)).unwrap();
        now += 1.0;
        engine.complete_iteration(SimTime::from_secs(now)).unwrap();
        engine.check_ledger().unwrap();
        if let Some(r) = engine.active().first() {
            held.push((
                r.num_processed_tokens,
                engine.ledger().allocated(7).unwrap(),
            ));
        }
    }
    assert_eq!(
        held,
        vec![
            (1500, 94),
            (1501, 94),
            (1502, 94),
            (1503, 94),
            (1504, 94),
            (1505, 95),
            (1506, 95),
            (1507, 95),
        ]
    );
    assert_eq!(engine.ledger().used(), 0);
}
