//! The cluster event loop.
//!
//! Every request lives in exactly one place: the global queue, a replica's
//! pending queue, or a replica's active set. The global policy runs after
//! every arrival and after every iteration that completes a request.

use serde::Serialize;

use crate::autoscale::{Autoscaler, ClusterLedger, ResizeAction, ScalerKind};
use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::metrics::{ClusterLogRow, GsLogRow, ReqsLogRow, RequestRecord, RunLogs, RunSummary};
use crate::replica::{ReplicaEngine, ReplicaId, Request};
use crate::routing::{DecodeOracle, GlobalPolicy, GlobalQueue, RatioEstimator, ScheduleContext};
use crate::sim::{EventKind, EventQueue, SimRng, SimTime, Substream};
use crate::workload::{
    generate_closed_loop, generate_open_loop, generate_sinusoidal, load_trace, ClosedLoopSource,
    RequestId, RequestTemplate, WorkloadMode,
};

/// Where arrivals come from.
pub enum Workload {
    /// A fixed, time-ordered arrival list.
    Arrivals(Vec<RequestTemplate>),
    ClosedLoop(Box<ClosedLoopSource>),
}

impl Workload {
    /// Materializes the workload described by `config`, drawing from the
    /// arrival and length substreams of `rng`.
    pub fn from_config(config: &RunConfig, rng: &mut SimRng) -> Result<Self> {
        let duration = SimTime::from_secs(config.duration);
        let spec = &config.workload;
        Ok(match &spec.mode {
            WorkloadMode::OpenLoop { .. } => {
                Workload::Arrivals(generate_open_loop(spec, rng, duration)?)
            }
            WorkloadMode::Sinusoidal { .. } => {
                Workload::Arrivals(generate_sinusoidal(spec, rng, duration)?)
            }
            WorkloadMode::ClosedLoop { .. } => {
                Workload::ClosedLoop(Box::new(generate_closed_loop(spec, rng)?))
            }
            WorkloadMode::Trace { path } => {
                let mut arrivals = load_trace(path)?;
                arrivals.retain(|t| t.arrival_offset < duration);
                Workload::Arrivals(arrivals)
            }
        })
    }
}

/// Fine-grained record of what happened, for replay checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Arrive {
        time: f64,
        request: RequestId,
    },
    Dispatch {
        time: f64,
        replica: ReplicaId,
        request: RequestId,
    },
    Batch {
        time: f64,
        replica: ReplicaId,
        decode: Vec<RequestId>,
        prefill: Vec<(RequestId, u32)>,
        ends: f64,
    },
    FirstToken {
        time: f64,
        request: RequestId,
    },
    Evict {
        time: f64,
        replica: ReplicaId,
        request: RequestId,
    },
    Complete {
        time: f64,
        replica: ReplicaId,
        request: RequestId,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Collect gs_log / reqs_log / cluster_log rows.
    pub logs: bool,
    /// Collect a [`TraceEvent`] list.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            logs: true,
            trace: false,
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub summary: RunSummary,
    /// Completed requests in completion order.
    pub records: Vec<RequestRecord>,
    pub logs: RunLogs,
    pub trace: Vec<TraceEvent>,
    /// Requests still in the system when the run stopped.
    pub unfinished: Vec<Request>,
    pub arrived: u64,
}

/// Runs `config` end to end with the policy it names.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    run_with_options(config, RunOptions::default())
}

pub fn run_with_options(config: &RunConfig, options: RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let mut rng = SimRng::new(config.seed);
    let workload = Workload::from_config(config, &mut rng)?;
    let policy = config
        .policy
        .build(&config.hra, rng.fork(Substream::Policy));
    Simulation::new(config.clone(), workload, policy, options)?.run()
}

pub struct Simulation {
    config: RunConfig,
    options: RunOptions,
    events: EventQueue,
    replicas: Vec<ReplicaEngine>,
    routable_from: Vec<SimTime>,
    cluster: ClusterLedger,
    queue: GlobalQueue,
    policy: Box<dyn GlobalPolicy>,
    estimator: RatioEstimator,
    oracle: Option<DecodeOracle>,
    autoscaler: Option<Autoscaler>,
    arrivals: Vec<RequestTemplate>,
    closed: Option<ClosedLoopSource>,
    next_id: RequestId,
    records: Vec<RequestRecord>,
    logs: RunLogs,
    trace: Vec<TraceEvent>,
    evictions: u64,
    /// Decode tokens per replica since the last autoscale tick.
    window_tokens: Vec<u64>,
}

impl Simulation {
    pub fn new(
        config: RunConfig,
        workload: Workload,
        policy: Box<dyn GlobalPolicy>,
        options: RunOptions,
    ) -> Result<Self> {
        config.validate()?;
        let (arrivals, closed) = match workload {
            Workload::Arrivals(a) => {
                if a.windows(2)
                    .any(|w| w[1].arrival_offset < w[0].arrival_offset)
                {
                    return Err(SimError::InvalidWorkload(
                        "arrivals are not time-ordered".into(),
                    ));
                }
                (a, None)
            }
            Workload::ClosedLoop(c) => (Vec::new(), Some(*c)),
        };
        let oracle = policy.clairvoyant().then(DecodeOracle::default);
        let mut sim = Simulation {
            options,
            events: EventQueue::new(),
            replicas: Vec::new(),
            routable_from: Vec::new(),
            cluster: ClusterLedger::new(),
            queue: GlobalQueue::new(policy.queue_order()),
            estimator: RatioEstimator::new(config.hra.r0, config.hra.ewma_alpha),
            oracle,
            autoscaler: config.autoscaler.clone().map(Autoscaler::new),
            policy,
            arrivals,
            closed,
            next_id: 0,
            records: Vec::new(),
            logs: RunLogs::default(),
            trace: Vec::new(),
            evictions: 0,
            window_tokens: Vec::new(),
            config,
        };
        for _ in 0..sim.config.num_replicas {
            sim.add_replica(SimTime::ZERO, SimTime::ZERO);
        }
        Ok(sim)
    }

    fn duration(&self) -> SimTime {
        SimTime::from_secs(self.config.duration)
    }

    fn add_replica(&mut self, now: SimTime, ready: SimTime) -> ReplicaId {
        let id = self.replicas.len() as ReplicaId;
        self.replicas
            .push(ReplicaEngine::new(id, self.config.replica.clone()));
        self.routable_from.push(ready);
        self.window_tokens.push(0);
        self.cluster.add(id, now);
        id
    }

    /// Requests arrived and not yet completed.
    fn in_system(&self) -> usize {
        self.queue.len()
            + self
                .replicas
                .iter()
                .map(ReplicaEngine::inflight)
                .sum::<usize>()
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let duration = self.duration();
        if !self.arrivals.is_empty() {
            self.events.schedule(
                self.arrivals[0].arrival_offset,
                EventKind::RequestArrival(0),
            )?;
        }
        if let Some(src) = &mut self.closed {
            for _ in 0..src.concurrency {
                let at = src.release_time(SimTime::ZERO);
                self.events.schedule(at, EventKind::WorkloadRefill)?;
            }
        }
        if let Some(scaler) = &self.autoscaler {
            let dt = scaler.spec().tick_interval;
            self.events
                .schedule(SimTime::from_secs(dt), EventKind::AutoscaleTick)?;
        }
        if self.options.logs && self.config.log_interval.is_some() {
            self.events.schedule(SimTime::ZERO, EventKind::LogTick)?;
        }

        let mut end = SimTime::ZERO;
        while let Some(ev) = self.events.pop() {
            if self.events.dequeued() > self.config.max_events {
                return Err(SimError::EventCapExceeded(self.config.max_events));
            }
            let now = ev.time;
            if !self.config.drain && now > duration {
                break;
            }
            end = now;
            match ev.kind {
                EventKind::RequestArrival(i) => {
                    let template = self.arrivals[i];
                    if let Some(next) = self.arrivals.get(i + 1) {
                        self.events
                            .schedule(next.arrival_offset, EventKind::RequestArrival(i + 1))?;
                    }
                    self.arrive(template, now);
                    self.schedule_point(now)?;
                }
                EventKind::WorkloadRefill => {
                    if now < duration {
                        let src = self
                            .closed
                            .as_mut()
                            .expect("refill without closed-loop source");
                        let template = src.next_template(now);
                        self.arrive(template, now);
                        self.schedule_point(now)?;
                    }
                }
                EventKind::IterationComplete(r) => self.complete(r, now)?,
                EventKind::AutoscaleTick => self.autoscale_tick(now)?,
                EventKind::LogTick => {
                    self.cluster_sample(now);
                    if now < duration || self.in_system() > 0 {
                        let dt = self.config.log_interval.expect("log tick without interval");
                        self.events.schedule(now + dt, EventKind::LogTick)?;
                    }
                }
            }
        }
        self.finish(end)
    }

    fn arrive(&mut self, template: RequestTemplate, now: SimTime) {
        let id = self.next_id;
        self.next_id += 1;
        let request = Request::new(id, now, &template);
        if let Some(oracle) = &mut self.oracle {
            oracle.record(id, request.total_tokens());
        }
        if self.options.trace {
            self.trace.push(TraceEvent::Arrive {
                time: now.as_secs(),
                request: id,
            });
        }
        self.queue.push(request);
    }

    fn routable(&self, now: SimTime) -> Vec<ReplicaId> {
        self.cluster
            .live()
            .into_iter()
            .filter(|&id| self.routable_from[id as usize] <= now)
            .collect()
    }

    /// Runs the global policy once and applies its decision.
    fn schedule_point(&mut self, now: SimTime) -> Result<()> {
        let routable = self.routable(now);
        if self.options.logs {
            for &id in &routable {
                let r = &self.replicas[id as usize];
                self.logs.gs_log.push(GsLogRow {
                    time: now.as_secs(),
                    replica_id: id,
                    num_pending_requests: r.pending().len(),
                    num_active_requests: r.active().len(),
                    num_allocated_blocks: r.ledger().used(),
                    num_blocks: r.ledger().num_blocks(),
                });
            }
        }
        if routable.is_empty() || self.queue.is_empty() {
            return Ok(());
        }
        let decision = {
            let observations: Vec<_> = routable
                .iter()
                .map(|&id| self.replicas[id as usize].observe())
                .collect();
            let ctx = ScheduleContext {
                now,
                queue: &self.queue,
                replicas: &observations,
                estimator: &self.estimator,
                oracle: self.oracle.as_ref(),
            };
            let decision = self.policy.schedule(&ctx);
            decision.validate(&ctx)?;
            decision
        };
        let mut touched: Vec<ReplicaId> = Vec::new();
        for (replica, id) in decision.dispatches {
            let mut request = self.queue.take(id).expect("validated dispatch");
            request.dispatched_at = Some(now);
            if self.options.logs {
                self.logs.reqs_log.push(ReqsLogRow {
                    time: now.as_secs(),
                    replica_id: replica,
                    request_id: id,
                    num_prefill_tokens: request.num_prefill_tokens,
                    num_decode_tokens: request.num_decode_tokens,
                });
            }
            if self.options.trace {
                self.trace.push(TraceEvent::Dispatch {
                    time: now.as_secs(),
                    replica,
                    request: id,
                });
            }
            self.replicas[replica as usize].dispatch(request)?;
            if !touched.contains(&replica) {
                touched.push(replica);
            }
        }
        for replica in touched {
            self.kick(replica, now)?;
        }
        Ok(())
    }

    /// Starts the next iteration on an idle replica.
    fn kick(&mut self, replica: ReplicaId, now: SimTime) -> Result<()> {
        let engine = &mut self.replicas[replica as usize];
        if engine.is_busy() {
            return Ok(());
        }
        let Some(plan) = engine.form_iteration(now)? else {
            return Ok(());
        };
        let ends = now + self.config.execution.iteration_latency(plan);
        if self.options.trace {
            self.trace.push(TraceEvent::Batch {
                time: now.as_secs(),
                replica,
                decode: plan.decode.clone(),
                prefill: plan.prefill.clone(),
                ends: ends.as_secs(),
            });
        }
        self.events
            .schedule(ends, EventKind::IterationComplete(replica))?;
        Ok(())
    }

    fn complete(&mut self, replica: ReplicaId, now: SimTime) -> Result<()> {
        let outcome = self.replicas[replica as usize].complete_iteration(now)?;
        self.window_tokens[replica as usize] += outcome.decode_tokens;
        self.evictions += outcome.evicted.len() as u64;
        if self.options.trace {
            for &request in &outcome.first_tokens {
                self.trace.push(TraceEvent::FirstToken {
                    time: now.as_secs(),
                    request,
                });
            }
            for &request in &outcome.evicted {
                self.trace.push(TraceEvent::Evict {
                    time: now.as_secs(),
                    replica,
                    request,
                });
            }
        }
        let finished_any = !outcome.completed.is_empty();
        for r in outcome.completed {
            self.estimator
                .update_on_completion(r.original_prefill_tokens, r.original_decode_tokens)?;
            if self.options.trace {
                self.trace.push(TraceEvent::Complete {
                    time: now.as_secs(),
                    replica,
                    request: r.id,
                });
            }
            self.records.push(RequestRecord::from_completed(
                &r,
                &self.config.execution,
                self.config.replica.chunk_size_tokens,
            ));
            if now < self.duration() {
                if let Some(src) = &mut self.closed {
                    let at = src.release_time(now);
                    self.events.schedule(at, EventKind::WorkloadRefill)?;
                }
            }
        }
        if finished_any {
            self.schedule_point(now)?;
        }
        self.kick(replica, now)?;
        self.retire_if_drained(replica, now);
        Ok(())
    }

    fn retire_if_drained(&mut self, replica: ReplicaId, now: SimTime) {
        let engine = &self.replicas[replica as usize];
        if self.cluster.is_draining(replica) && engine.is_empty() && !engine.is_busy() {
            self.cluster.remove(replica, now);
        }
    }

    fn autoscale_tick(&mut self, now: SimTime) -> Result<()> {
        let scaler = self.autoscaler.as_mut().expect("tick without autoscaler");
        let live = self.cluster.live();
        let dt = scaler.spec().tick_interval;
        let action = match scaler.spec().kind {
            ScalerKind::Fixed => ResizeAction::Hold,
            ScalerKind::Threshold { .. } => {
                let tokens: u64 = live.iter().map(|&id| self.window_tokens[id as usize]).sum();
                let per_instance = tokens as f64 / dt / live.len().max(1) as f64;
                scaler.tick_threshold(now, per_instance, live.len())
            }
            ScalerKind::Proportional { .. } => {
                let inflight = self.queue.len()
                    + live
                        .iter()
                        .map(|&id| self.replicas[id as usize].inflight())
                        .sum::<usize>();
                scaler.tick_proportional(now, inflight, live.len())
            }
        };
        let startup = scaler.spec().startup_delay;
        self.window_tokens.iter_mut().for_each(|t| *t = 0);

        match action {
            ResizeAction::Hold => {}
            ResizeAction::Add(n) => {
                for _ in 0..n {
                    self.add_replica(now, now + startup);
                }
                self.schedule_point(now)?;
            }
            ResizeAction::Remove(n) => {
                let mut candidates = live;
                // least busy first; among equals the newest goes
                candidates.sort_by_key(|&id| {
                    (self.replicas[id as usize].inflight(), std::cmp::Reverse(id))
                });
                for &id in candidates.iter().take(n) {
                    self.cluster.start_drain(id, now)?;
                    self.retire_if_drained(id, now);
                }
            }
        }
        if now < self.duration() || self.in_system() > 0 {
            self.events.schedule(now + dt, EventKind::AutoscaleTick)?;
        }
        Ok(())
    }

    fn cluster_sample(&mut self, now: SimTime) {
        let live = self.cluster.live();
        let inflight = self.replicas.iter().map(ReplicaEngine::inflight).sum();
        self.logs.cluster_log.push(ClusterLogRow {
            time: now.as_secs(),
            live_replicas: live.len(),
            draining_replicas: self.cluster.draining().len(),
            queued_requests: self.queue.len(),
            inflight_requests: inflight,
        });
    }

    fn finish(mut self, end: SimTime) -> Result<RunOutput> {
        let mut unfinished: Vec<Request> = self.queue.drain();
        for r in &mut self.replicas {
            unfinished.extend(r.take_all());
        }
        unfinished.sort_by_key(|r| r.id);
        let horizon = end.max(self.duration());
        let mut summary = RunSummary::from_records(&self.records);
        summary.unfinished = unfinished.len();
        summary.num_evictions = self.evictions;
        summary.gpu_hours = self.cluster.gpu_hours(horizon);
        summary.end_time = end.as_secs();
        summary.num_events = self.events.dequeued();
        self.logs.scaler_log = self.cluster.log().to_vec();
        Ok(RunOutput {
            config: self.config,
            summary,
            records: self.records,
            logs: self.logs,
            trace: self.trace,
            unfinished,
            arrived: self.next_id,
        })
    }
}
