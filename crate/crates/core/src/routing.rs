//! Global routing policies.
//!
//! A policy sees the global queue and one [`ReplicaObservation`] per
//! routable replica, and returns an ordered list of `(replica, request)`
//! dispatches. Neither view exposes decode lengths.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SimError};
use crate::replica::{ReplicaId, ReplicaObservation, Request, RequestView};
use crate::sim::SimTime;
use crate::workload::RequestId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueOrder {
    #[default]
    Fifo,
    ShortestPrefillFirst,
}

/// A queued request as policies see it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueuedRequest {
    pub id: RequestId,
    pub arrived_at: SimTime,
    pub num_prefill_tokens: u32,
}

/// Arrived requests not yet dispatched to a replica.
#[derive(Debug, Default)]
pub struct GlobalQueue {
    order: QueueOrder,
    items: Vec<Request>,
}

impl GlobalQueue {
    pub fn new(order: QueueOrder) -> Self {
        GlobalQueue {
            order,
            items: Vec::new(),
        }
    }

    pub fn order(&self) -> QueueOrder {
        self.order
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = QueuedRequest> + '_ {
        self.items.iter().map(|r| QueuedRequest {
            id: r.id,
            arrived_at: r.arrived_at,
            num_prefill_tokens: r.num_prefill_tokens,
        })
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.items.iter().any(|r| r.id == id)
    }

    pub fn push(&mut self, request: Request) {
        match self.order {
            QueueOrder::Fifo => self.items.push(request),
            QueueOrder::ShortestPrefillFirst => {
                let key = |r: &Request| (r.num_prefill_tokens, r.arrived_at, r.id);
                let at = self.items.partition_point(|r| key(r) <= key(&request));
                self.items.insert(at, request);
            }
        }
    }

    pub fn take(&mut self, id: RequestId) -> Option<Request> {
        let i = self.items.iter().position(|r| r.id == id)?;
        Some(self.items.remove(i))
    }

    pub(crate) fn drain(&mut self) -> Vec<Request> {
        std::mem::take(&mut self.items)
    }
}

/// Workload-level decode-to-prefill ratio, an EWMA over completions.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioEstimator {
    r_hat: f64,
    alpha: f64,
    samples: u64,
}

impl RatioEstimator {
    pub fn new(r0: f64, alpha: f64) -> Self {
        RatioEstimator {
            r_hat: r0,
            alpha,
            samples: 0,
        }
    }

    pub fn r_hat(&self) -> f64 {
        self.r_hat
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// `prefill_at_arrival` is the original prompt length, before any
    /// restart folded decode progress into it.
    pub fn update_on_completion(
        &mut self,
        prefill_at_arrival: u32,
        decode_total: u32,
    ) -> Result<()> {
        if prefill_at_arrival == 0 {
            return Err(SimError::Contract("ratio update with zero prefill".into()));
        }
        let ratio = decode_total as f64 / prefill_at_arrival as f64;
        self.r_hat = (1.0 - self.alpha) * self.r_hat + self.alpha * ratio;
        self.samples += 1;
        Ok(())
    }
}

/// Total (prefill + decode) tokens per request, for the clairvoyant test
/// policy only.
#[derive(Clone, Debug, Default)]
pub struct DecodeOracle {
    totals: Vec<Option<u32>>,
}

impl DecodeOracle {
    pub fn record(&mut self, id: RequestId, total_tokens: u32) {
        let i = id as usize;
        if self.totals.len() <= i {
            self.totals.resize(i + 1, None);
        }
        self.totals[i] = Some(total_tokens);
    }

    pub fn total_tokens(&self, id: RequestId) -> Option<u32> {
        self.totals.get(id as usize).copied().flatten()
    }
}

pub struct ScheduleContext<'a> {
    pub now: SimTime,
    pub queue: &'a GlobalQueue,
    /// Routable replicas, ascending id.
    pub replicas: &'a [ReplicaObservation<'a>],
    pub estimator: &'a RatioEstimator,
    pub oracle: Option<&'a DecodeOracle>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingDecision {
    pub dispatches: Vec<(ReplicaId, RequestId)>,
}

impl RoutingDecision {
    pub fn is_empty(&self) -> bool {
        self.dispatches.is_empty()
    }

    /// Rejects dispatches naming unknown replicas or requests, or naming a
    /// request twice.
    pub fn validate(&self, ctx: &ScheduleContext<'_>) -> Result<()> {
        let mut seen = Vec::with_capacity(self.dispatches.len());
        for &(replica, request) in &self.dispatches {
            if !ctx.replicas.iter().any(|o| o.replica_id() == replica) {
                return Err(SimError::Contract(format!(
                    "dispatch of request {request} to unknown or draining replica {replica}"
                )));
            }
            if !ctx.queue.contains(request) {
                return Err(SimError::Contract(format!(
                    "dispatch of request {request} which is not in the global queue"
                )));
            }
            if seen.contains(&request) {
                return Err(SimError::Contract(format!(
                    "request {request} dispatched twice"
                )));
            }
            seen.push(request);
        }
        Ok(())
    }
}

/// The global-scheduler contract. Called after every arrival and every
/// completion.
pub trait GlobalPolicy: Send {
    fn name(&self) -> &str;

    fn queue_order(&self) -> QueueOrder {
        QueueOrder::Fifo
    }

    /// Whether the engine should supply a [`DecodeOracle`].
    fn clairvoyant(&self) -> bool {
        false
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision;
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(rng: ChaCha8Rng) -> Self {
        RandomPolicy { rng }
    }
}

impl GlobalPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        let n = ctx.replicas.len();
        let dispatches = ctx
            .queue
            .iter()
            .map(|q| (ctx.replicas[self.rng.random_range(0..n)].replica_id(), q.id))
            .collect();
        RoutingDecision { dispatches }
    }
}

#[derive(Default)]
pub struct RoundRobin {
    cursor: usize,
}

impl GlobalPolicy for RoundRobin {
    fn name(&self) -> &str {
        "round_robin"
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        let n = ctx.replicas.len();
        let dispatches = ctx
            .queue
            .iter()
            .map(|q| {
                let replica = ctx.replicas[self.cursor % n].replica_id();
                self.cursor = (self.cursor + 1) % n;
                (replica, q.id)
            })
            .collect();
        RoutingDecision { dispatches }
    }
}

/// Index of the minimum load; ties go to the lowest replica id.
fn argmin(loads: &[usize]) -> usize {
    let mut best = 0;
    for (i, &load) in loads.iter().enumerate() {
        if load < loads[best] {
            best = i;
        }
    }
    best
}

/// Least-loaded queue: fewest pending + active requests.
#[derive(Default)]
pub struct Llq;

impl Llq {
    fn place(
        replicas: &[ReplicaObservation<'_>],
        requests: impl Iterator<Item = RequestId>,
    ) -> Vec<(ReplicaId, RequestId)> {
        let mut loads: Vec<usize> = replicas
            .iter()
            .map(|o| o.num_pending_requests() + o.num_active_requests())
            .collect();
        requests
            .map(|id| {
                let k = argmin(&loads);
                loads[k] += 1;
                (replicas[k].replica_id(), id)
            })
            .collect()
    }
}

impl GlobalPolicy for Llq {
    fn name(&self) -> &str {
        "llq"
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        RoutingDecision {
            dispatches: Llq::place(ctx.replicas, ctx.queue.iter().map(|q| q.id)),
        }
    }
}

/// Least outstanding requests: fewest requests still waiting for memory.
#[derive(Default)]
pub struct Lor;

impl GlobalPolicy for Lor {
    fn name(&self) -> &str {
        "lor"
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        let mut loads: Vec<usize> = ctx
            .replicas
            .iter()
            .map(|o| o.num_pending_requests())
            .collect();
        let dispatches = ctx
            .queue
            .iter()
            .map(|q| {
                let k = argmin(&loads);
                loads[k] += 1;
                (ctx.replicas[k].replica_id(), q.id)
            })
            .collect();
        RoutingDecision { dispatches }
    }
}

/// Non-negative real that may be infinite; serialized as `"inf"` in JSON.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Threshold(pub f64);

impl Threshold {
    pub const INFINITE: Threshold = Threshold(f64::INFINITY);
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Threshold {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Threshold::INFINITE),
            other => other
                .parse::<f64>()
                .map(Threshold)
                .map_err(|e| format!("bad threshold `{other}`: {e}")),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Threshold(x)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HraParams {
    /// Fraction of each replica's blocks kept free after a forecast
    /// admission.
    pub m: f64,
    /// Holding is active while the estimated ratio exceeds this.
    pub r_threshold: Threshold,
    pub r0: f64,
    pub ewma_alpha: f64,
    pub scan_window: usize,
    /// Force-dispatch (LLQ placement) requests held longer than this.
    pub max_hold_age: Option<f64>,
    /// Also charge each replica for the forecast growth still owed to its
    /// resident requests and the forecast size of its pending ones, instead
    /// of counting free blocks only.
    pub reserve_growth: bool,
}

impl Default for HraParams {
    fn default() -> Self {
        HraParams {
            m: 0.1,
            r_threshold: Threshold(1.0),
            r0: 1.0,
            ewma_alpha: 0.05,
            scan_window: 16,
            max_hold_age: None,
            reserve_growth: false,
        }
    }
}

impl HraParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(SimError::InvalidConfig(format!(
                "hra.m {} outside [0, 1)",
                self.m
            )));
        }
        if !(self.r_threshold.0 >= 0.0) {
            return Err(SimError::InvalidConfig(
                "hra.r_threshold must be >= 0".into(),
            ));
        }
        if !(self.r0 >= 0.0) {
            return Err(SimError::InvalidConfig("hra.r0 must be >= 0".into()));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(SimError::InvalidConfig(
                "hra.ewma_alpha outside (0, 1]".into(),
            ));
        }
        if self.scan_window == 0 {
            return Err(SimError::InvalidConfig(
                "hra.scan_window must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The setting under which HRA makes exactly LLQ's decisions.
    pub fn degenerate() -> Self {
        HraParams {
            m: 0.0,
            r_threshold: Threshold::INFINITE,
            ..HraParams::default()
        }
    }
}

/// Head-room admission.
///
/// Each request is forecast to grow to `B(q) = ceil((P + r_hat * P) / block)`
/// blocks. While the workload ratio estimate exceeds `r_threshold`, a request
/// is dispatched only to a replica whose head-room stays at or above
/// `m * num_blocks` after subtracting `B(q)`; otherwise it waits in the
/// shortest-prefill-first global queue. A replica's head-room is its free
/// blocks, reduced within one call by what the call already placed there;
/// with `reserve_growth` it also excludes the forecast growth still owed to
/// resident requests and the forecast size of pending ones. Among
/// admissible replicas the one with most head-room wins (ties to the lowest
/// id). With holding inactive every request is placed as LLQ would.
///
/// A forecast larger than the usable capacity `num_blocks - ceil(m *
/// num_blocks)` is clamped to it, so such a request waits for an empty
/// replica instead of waiting forever.
pub struct Hra {
    params: HraParams,
}

impl Hra {
    pub fn new(params: HraParams) -> Self {
        Hra { params }
    }

    pub fn params(&self) -> &HraParams {
        &self.params
    }

    pub fn forecast_blocks(prefill: u32, r_hat: f64, block_size: u32) -> u64 {
        let tokens = prefill as f64 + r_hat * prefill as f64;
        (tokens / block_size as f64).ceil() as u64
    }

    fn need(&self, obs: &ReplicaObservation<'_>, prefill: u32, r_hat: f64) -> u64 {
        let usable = obs.num_blocks() - (self.params.m * obs.num_blocks() as f64).ceil() as u64;
        Hra::forecast_blocks(prefill, r_hat, obs.block_size_tokens()).min(usable)
    }

    fn headroom(&self, obs: &ReplicaObservation<'_>, r_hat: f64) -> i64 {
        if !self.params.reserve_growth {
            return obs.free_blocks() as i64;
        }
        let bs = obs.block_size_tokens();
        let blocks = |tokens: u32| (tokens as u64).div_ceil(bs as u64);
        let owed: u64 = obs
            .active()
            .map(|v: RequestView| {
                let resident = blocks(v.num_prefill_tokens.max(v.num_processed_tokens));
                Hra::forecast_blocks(v.num_prefill_tokens, r_hat, bs).saturating_sub(resident)
            })
            .sum();
        let queued: u64 = obs
            .pending()
            .map(|v| Hra::forecast_blocks(v.num_prefill_tokens, r_hat, bs))
            .sum();
        obs.free_blocks() as i64 - owed as i64 - queued as i64
    }
}

impl GlobalPolicy for Hra {
    fn name(&self) -> &str {
        "hra"
    }

    fn queue_order(&self) -> QueueOrder {
        QueueOrder::ShortestPrefillFirst
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        let r_hat = ctx.estimator.r_hat();
        let holding = r_hat > self.params.r_threshold.0;
        if !holding {
            return RoutingDecision {
                dispatches: Llq::place(ctx.replicas, ctx.queue.iter().map(|q| q.id)),
            };
        }

        let mut headroom: Vec<i64> = ctx
            .replicas
            .iter()
            .map(|o| self.headroom(o, r_hat))
            .collect();
        let mut dispatches = Vec::new();
        let mut held = Vec::new();
        for (pos, q) in ctx.queue.iter().enumerate() {
            if pos >= self.params.scan_window {
                held.push(q);
                continue;
            }
            let mut best: Option<usize> = None;
            for (k, obs) in ctx.replicas.iter().enumerate() {
                let need = self.need(obs, q.num_prefill_tokens, r_hat);
                let margin = self.params.m * obs.num_blocks() as f64;
                if (headroom[k] - need as i64) as f64 >= margin
                    && best.is_none_or(|b| headroom[k] > headroom[b])
                {
                    best = Some(k);
                }
            }
            match best {
                Some(k) => {
                    let obs = &ctx.replicas[k];
                    headroom[k] -= self.need(obs, q.num_prefill_tokens, r_hat) as i64;
                    dispatches.push((obs.replica_id(), q.id));
                }
                None => held.push(q),
            }
        }

        if let Some(max_age) = self.params.max_hold_age {
            let stale: Vec<RequestId> = held
                .iter()
                .filter(|q| ctx.now - q.arrived_at > max_age)
                .map(|q| q.id)
                .collect();
            if !stale.is_empty() {
                // account for what this call already placed
                let mut loads: Vec<usize> = ctx
                    .replicas
                    .iter()
                    .map(|o| o.num_pending_requests() + o.num_active_requests())
                    .collect();
                for &(r, _) in &dispatches {
                    if let Some(k) = ctx.replicas.iter().position(|o| o.replica_id() == r) {
                        loads[k] += 1;
                    }
                }
                for id in stale {
                    let k = argmin(&loads);
                    loads[k] += 1;
                    dispatches.push((ctx.replicas[k].replica_id(), id));
                }
            }
        }
        RoutingDecision { dispatches }
    }
}

/// Test-only clairvoyant policy: reserves each request's true final size on
/// dispatch, so no replica can ever run out of blocks.
#[derive(Default)]
pub struct OracleReservation;

impl GlobalPolicy for OracleReservation {
    fn name(&self) -> &str {
        "oracle_test"
    }

    fn clairvoyant(&self) -> bool {
        true
    }

    fn schedule(&mut self, ctx: &ScheduleContext<'_>) -> RoutingDecision {
        let oracle = ctx
            .oracle
            .expect("oracle_test policy requires a decode oracle");
        let reserve = |id: RequestId, bs: u32| -> u64 {
            let total = oracle.total_tokens(id).expect("request unknown to oracle");
            (total as u64).div_ceil(bs as u64)
        };
        let mut free: Vec<i64> = ctx
            .replicas
            .iter()
            .map(|o| {
                let bs = o.block_size_tokens();
                let held: u64 = o
                    .pending()
                    .chain(o.active())
                    .map(|v| reserve(v.id, bs))
                    .sum();
                o.num_blocks() as i64 - held as i64
            })
            .collect();
        let mut dispatches = Vec::new();
        for q in ctx.queue.iter() {
            let mut best: Option<usize> = None;
            for (k, o) in ctx.replicas.iter().enumerate() {
                let need = reserve(q.id, o.block_size_tokens()) as i64;
                if free[k] >= need && best.is_none_or(|b| free[k] > free[b]) {
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                free[k] -= reserve(q.id, ctx.replicas[k].block_size_tokens()) as i64;
                dispatches.push((ctx.replicas[k].replica_id(), q.id));
            }
        }
        RoutingDecision { dispatches }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    RoundRobin,
    #[default]
    Llq,
    Lor,
    Hra,
    OracleTest,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::Llq => "llq",
            PolicyKind::Lor => "lor",
            PolicyKind::Hra => "hra",
            PolicyKind::OracleTest => "oracle_test",
        }
    }

    pub fn build(self, hra: &HraParams, rng: ChaCha8Rng) -> Box<dyn GlobalPolicy> {
        match self {
            PolicyKind::Random => Box::new(RandomPolicy::new(rng)),
            PolicyKind::RoundRobin => Box::new(RoundRobin::default()),
            PolicyKind::Llq => Box::new(Llq),
            PolicyKind::Lor => Box::new(Lor),
            PolicyKind::Hra => Box::new(Hra::new(hra.clone())),
            PolicyKind::OracleTest => Box::new(OracleReservation),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            PolicyKind::Random,
            PolicyKind::RoundRobin,
            PolicyKind::Llq,
            PolicyKind::Lor,
            PolicyKind::Hra,
            PolicyKind::OracleTest,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
