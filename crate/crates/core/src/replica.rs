//! One serving instance: paged KV-cache block ledger, pending/active queues,
//! chunked-prefill batch formation and preempt-on-growth eviction.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::SimTime;
use crate::workload::{RequestId, RequestTemplate};

pub type ReplicaId = u32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    #[default]
    Arrival,
    ShortestPrefillFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub num_blocks: u64,
    #[serde(default = "default_block_size")]
    pub block_size_tokens: u32,
    #[serde(default = "default_chunk_size")]
    pub chunk_size_tokens: u32,
    #[serde(default = "default_max_batch")]
    pub max_batch_requests: usize,
    #[serde(default)]
    pub order_mode: OrderMode,
}

fn default_block_size() -> u32 {
    16
}
fn default_chunk_size() -> u32 {
    8192
}
fn default_max_batch() -> usize {
    256
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            num_blocks: 4096,
            block_size_tokens: default_block_size(),
            chunk_size_tokens: default_chunk_size(),
            max_batch_requests: default_max_batch(),
            order_mode: OrderMode::Arrival,
        }
    }
}

impl ReplicaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(SimError::InvalidConfig(
                "num_blocks must be positive".into(),
            ));
        }
        if self.block_size_tokens == 0 {
            return Err(SimError::InvalidConfig(
                "block_size_tokens must be positive".into(),
            ));
        }
        if self.chunk_size_tokens < self.block_size_tokens {
            return Err(SimError::InvalidConfig(
                "chunk_size_tokens must be at least block_size_tokens".into(),
            ));
        }
        if self.max_batch_requests == 0 {
            return Err(SimError::InvalidConfig(
                "max_batch_requests must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Analytic iteration latency: `c0 + c1 * prefill_tokens + c2 * decode_seqs`.
///
/// The defaults are calibration knobs, roughly an 8B model on a 24 GB card.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for ExecutionModel {
    fn default() -> Self {
        ExecutionModel {
            c0: 0.006,
            c1: 4e-5,
            c2: 0.0015,
        }
    }
}

impl ExecutionModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0) || !(self.c1 >= 0.0) || !(self.c2 >= 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "execution coefficients need c0 > 0 and c1, c2 >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn iteration_latency(&self, plan: &IterationPlan) -> f64 {
        if plan.is_empty() {
            return 0.0;
        }
        self.c0 + self.c1 * plan.prefill_tokens() as f64 + self.c2 * plan.decode.len() as f64
    }

    /// Completion time of a request alone on an idle replica.
    pub fn ideal_rt(&self, prefill: u32, decode: u32, chunk_size: u32) -> f64 {
        let mut remaining = prefill;
        let mut rt = 0.0;
        while remaining > 0 {
            let chunk = remaining.min(chunk_size);
            rt += self.c0 + self.c1 * chunk as f64;
            remaining -= chunk;
        }
        rt + decode as f64 * (self.c0 + self.c2)
    }
}

/// A request's lifecycle state. Owned by exactly one queue at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrived_at: SimTime,
    /// Current prefill length; grows to the processed count when a decoding
    /// request is evicted.
    pub num_prefill_tokens: u32,
    pub num_decode_tokens: u32,
    pub original_prefill_tokens: u32,
    pub original_decode_tokens: u32,
    pub num_processed_tokens: u32,
    pub num_restarts: u32,
    pub dispatched_at: Option<SimTime>,
    pub admitted_at: Option<SimTime>,
    pub first_admitted_at: Option<SimTime>,
    pub first_token_at: Option<SimTime>,
    pub completed_at: Option<SimTime>,
    pub replica_id: Option<ReplicaId>,
    /// Token-iterations spent on this request, including work lost to
    /// eviction.
    pub tokens_computed: u64,
}

impl Request {
    pub fn new(id: RequestId, arrived_at: SimTime, template: &RequestTemplate) -> Self {
        Request {
            id,
            arrived_at,
            num_prefill_tokens: template.num_prefill_tokens,
            num_decode_tokens: template.num_decode_tokens,
            original_prefill_tokens: template.num_prefill_tokens,
            original_decode_tokens: template.num_decode_tokens,
            num_processed_tokens: 0,
            num_restarts: 0,
            dispatched_at: None,
            admitted_at: None,
            first_admitted_at: None,
            first_token_at: None,
            completed_at: None,
            replica_id: None,
            tokens_computed: 0,
        }
    }

    pub fn total_tokens(&self) -> u32 {
        self.num_prefill_tokens + self.num_decode_tokens
    }

    pub fn in_decode(&self) -> bool {
        self.num_processed_tokens >= self.num_prefill_tokens
    }

    fn is_done(&self) -> bool {
        self.num_processed_tokens >= self.total_tokens()
    }

    /// Ordering key for "youngest": latest admission, then larger id.
    fn age_key(&self) -> (SimTime, RequestId) {
        (self.admitted_at.unwrap_or(SimTime::ZERO), self.id)
    }
}

/// Paged KV-cache accounting.
#[derive(Clone, Debug)]
pub struct BlockLedger {
    num_blocks: u64,
    block_size_tokens: u32,
    used: u64,
    allocated: BTreeMap<RequestId, u64>,
}

impl BlockLedger {
    pub fn new(num_blocks: u64, block_size_tokens: u32) -> Self {
        BlockLedger {
            num_blocks,
            block_size_tokens,
            used: 0,
            allocated: BTreeMap::new(),
        }
    }

    pub fn blocks_for(&self, tokens: u32) -> u64 {
        (tokens as u64).div_ceil(self.block_size_tokens as u64)
    }

    pub fn num_blocks(&self) -> u64 {
        self.num_blocks
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.num_blocks - self.used
    }

    pub fn allocated(&self, id: RequestId) -> Option<u64> {
        self.allocated.get(&id).copied()
    }

    fn allocate(&mut self, id: RequestId, blocks: u64) -> bool {
        if blocks > self.free() {
            return false;
        }
        *self.allocated.entry(id).or_insert(0) += blocks;
        self.used += blocks;
        true
    }

    fn release(&mut self, id: RequestId) -> u64 {
        let blocks = self.allocated.remove(&id).unwrap_or(0);
        self.used -= blocks;
        blocks
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IterationPlan {
    /// Decode-phase members, one new token each.
    pub decode: Vec<RequestId>,
    /// Prefill members and their chunk sizes.
    pub prefill: Vec<(RequestId, u32)>,
}

impl IterationPlan {
    pub fn is_empty(&self) -> bool {
        self.decode.is_empty() && self.prefill.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn scheduled_tokens(&self) -> u64 {
        self.prefill_tokens() + self.decode.len() as u64
    }

    pub fn len(&self) -> usize {
        self.decode.len() + self.prefill.len()
    }
}

#[derive(Debug, Default)]
pub struct IterationOutcome {
    pub completed: Vec<Request>,
    pub first_tokens: Vec<RequestId>,
    pub evicted: Vec<RequestId>,
    pub decode_tokens: u64,
}

/// Read-only view of a request on a replica. Has no decode-length field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RequestView {
    pub id: RequestId,
    pub arrived_at: SimTime,
    pub num_prefill_tokens: u32,
    pub num_processed_tokens: u32,
}

impl From<&Request> for RequestView {
    fn from(r: &Request) -> Self {
        RequestView {
            id: r.id,
            arrived_at: r.arrived_at,
            num_prefill_tokens: r.num_prefill_tokens,
            num_processed_tokens: r.num_processed_tokens,
        }
    }
}

/// What a global policy may see of a replica.
#[derive(Clone, Copy, Debug)]
pub struct ReplicaObservation<'a> {
    engine: &'a ReplicaEngine,
}

impl<'a> ReplicaObservation<'a> {
    pub fn replica_id(&self) -> ReplicaId {
        self.engine.id
    }
    pub fn num_pending_requests(&self) -> usize {
        self.engine.pending.len()
    }
    pub fn num_active_requests(&self) -> usize {
        self.engine.active.len()
    }
    pub fn num_allocated_blocks(&self) -> u64 {
        self.engine.ledger.used()
    }
    pub fn num_blocks(&self) -> u64 {
        self.engine.ledger.num_blocks()
    }
    pub fn free_blocks(&self) -> u64 {
        self.engine.ledger.free()
    }
    pub fn block_size_tokens(&self) -> u32 {
        self.engine.config.block_size_tokens
    }
    pub fn memory_usage_percent(&self) -> f64 {
        self.num_allocated_blocks() as f64 / self.num_blocks() as f64 * 100.0
    }
    pub fn pending(&self) -> impl Iterator<Item = RequestView> + 'a {
        self.engine.pending.iter().map(RequestView::from)
    }
    pub fn active(&self) -> impl Iterator<Item = RequestView> + 'a {
        self.engine.active.iter().map(RequestView::from)
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaEngine {
    id: ReplicaId,
    config: ReplicaConfig,
    ledger: BlockLedger,
    pending: VecDeque<Request>,
    /// Admission order.
    active: Vec<Request>,
    in_flight: Option<IterationPlan>,
}

impl ReplicaEngine {
    pub fn new(id: ReplicaId, config: ReplicaConfig) -> Self {
        let ledger = BlockLedger::new(config.num_blocks, config.block_size_tokens);
        ReplicaEngine {
            id,
            config,
            ledger,
            pending: VecDeque::new(),
            active: Vec::new(),
            in_flight: None,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.config
    }

    pub fn ledger(&self) -> &BlockLedger {
        &self.ledger
    }

    pub fn observe(&self) -> ReplicaObservation<'_> {
        ReplicaObservation { engine: self }
    }

    pub fn pending(&self) -> &VecDeque<Request> {
        &self.pending
    }

    pub fn active(&self) -> &[Request] {
        &self.active
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn in_flight(&self) -> Option<&IterationPlan> {
        self.in_flight.as_ref()
    }

    /// Requests on this replica, pending or active.
    pub fn inflight(&self) -> usize {
        self.pending.len() + self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inflight() == 0
    }

    fn contains(&self, id: RequestId) -> bool {
        self.pending.iter().any(|r| r.id == id) || self.active.iter().any(|r| r.id == id)
    }

    pub fn dispatch(&mut self, mut request: Request) -> Result<()> {
        if self.contains(request.id) {
            return Err(SimError::DuplicateDispatch(request.id, self.id));
        }
        request.num_processed_tokens = 0;
        request.replica_id = Some(self.id);
        self.pending.push_back(request);
        Ok(())
    }

    /// Builds the next batch. Decodes first, then the in-progress prefill,
    /// then newly admitted pending requests in `order_mode` order. Admission
    /// reserves the whole prompt and stops at the first request that does
    /// not fit.
    pub fn form_iteration(&mut self, now: SimTime) -> Result<Option<&IterationPlan>> {
        assert!(self.in_flight.is_none(), "replica {} already busy", self.id);
        let mut budget = self.config.chunk_size_tokens;
        let mut slots = self.config.max_batch_requests;
        let mut plan = IterationPlan::default();

        let mut order: Vec<usize> = (0..self.active.len()).collect();
        order.sort_by_key(|&i| self.active[i].age_key());

        for &i in &order {
            let r = &self.active[i];
            if !r.in_decode() {
                continue;
            }
            if budget == 0 || slots == 0 {
                break;
            }
            plan.decode.push(r.id);
            budget -= 1;
            slots -= 1;
        }
        for &i in &order {
            let r = &self.active[i];
            if r.in_decode() {
                continue;
            }
            if budget == 0 || slots == 0 {
                break;
            }
            let chunk = budget.min(r.num_prefill_tokens - r.num_processed_tokens);
            plan.prefill.push((r.id, chunk));
            budget -= chunk;
            slots -= 1;
        }

        let mut candidates: Vec<usize> = (0..self.pending.len()).collect();
        if self.config.order_mode == OrderMode::ShortestPrefillFirst {
            candidates.sort_by_key(|&i| self.pending[i].num_prefill_tokens);
        }
        let mut admitted = Vec::new();
        for i in candidates {
            if budget == 0 || slots == 0 {
                break;
            }
            let r = &self.pending[i];
            let need = self.ledger.blocks_for(r.num_prefill_tokens);
            if need > self.ledger.num_blocks() {
                return Err(SimError::CapacityExceeded {
                    replica: self.id,
                    request: r.id,
                    needed: need,
                    capacity: self.ledger.num_blocks(),
                });
            }
            if !self.ledger.allocate(r.id, need) {
                break;
            }
            let chunk = budget.min(r.num_prefill_tokens);
            plan.prefill.push((r.id, chunk));
            budget -= chunk;
            slots -= 1;
            admitted.push(i);
        }
        if !admitted.is_empty() {
            let mut taken: Vec<Option<Request>> = self.pending.drain(..).map(Some).collect();
            for &i in &admitted {
                let mut r = taken[i].take().expect("admitted twice");
                r.admitted_at = Some(now);
                r.first_admitted_at.get_or_insert(now);
                self.active.push(r);
            }
            self.pending = taken.into_iter().flatten().collect();
        }

        if plan.is_empty() {
            return Ok(None);
        }
        self.in_flight = Some(plan);
        Ok(self.in_flight.as_ref())
    }

    fn active_index(&self, id: RequestId) -> Option<usize> {
        self.active.iter().position(|r| r.id == id)
    }

    /// Applies the in-flight plan's progress at `now`.
    ///
    /// Finished requests leave before decode growth is charged, so a request
    /// emitting its last token never triggers an eviction.
    pub fn complete_iteration(&mut self, now: SimTime) -> Result<IterationOutcome> {
        let plan = self
            .in_flight
            .take()
            .expect("complete_iteration without an in-flight plan");
        let mut outcome = IterationOutcome::default();

        for &(id, chunk) in &plan.prefill {
            let i = self.active_index(id).expect("prefill member not active");
            let r = &mut self.active[i];
            r.num_processed_tokens += chunk;
            r.tokens_computed += chunk as u64;
            if r.in_decode() && r.first_token_at.is_none() {
                r.first_token_at = Some(now);
                outcome.first_tokens.push(id);
            }
        }
        for &id in &plan.decode {
            let i = self.active_index(id).expect("decode member not active");
            let r = &mut self.active[i];
            r.num_processed_tokens += 1;
            r.tokens_computed += 1;
            outcome.decode_tokens += 1;
        }

        let mut i = 0;
        while i < self.active.len() {
            if self.active[i].is_done() {
                let mut r = self.active.remove(i);
                self.ledger.release(r.id);
                r.completed_at = Some(now);
                outcome.completed.push(r);
            } else {
                i += 1;
            }
        }

        let mut growers: Vec<(SimTime, RequestId)> = plan
            .decode
            .iter()
            .filter_map(|&id| self.active_index(id).map(|i| self.active[i].age_key()))
            .collect();
        growers.sort();
        for (_, id) in growers {
            let Some(i) = self.active_index(id) else {
                continue; // evicted by an older grower
            };
            let r = &self.active[i];
            let want = self.ledger.blocks_for(r.num_processed_tokens);
            let have = self.ledger.allocated(id).unwrap_or(0);
            if want <= have {
                continue;
            }
            let need = want - have;
            if !self.evict_for_growth(id, need, &mut outcome.evicted)? {
                continue;
            }
            let ok = self.ledger.allocate(id, need);
            debug_assert!(ok);
        }
        Ok(outcome)
    }

    /// Frees room for `grower` to take `need` more blocks by evicting the
    /// youngest active requests. Returns false if the grower itself turned
    /// out to be the youngest and was evicted.
    pub fn evict_for_growth(
        &mut self,
        grower: RequestId,
        need: u64,
        evicted: &mut Vec<RequestId>,
    ) -> Result<bool> {
        while self.ledger.free() < need {
            if self.active.len() == 1 {
                let held = self.ledger.allocated(grower).unwrap_or(0);
                return Err(SimError::CapacityExceeded {
                    replica: self.id,
                    request: grower,
                    needed: held + need,
                    capacity: self.ledger.num_blocks(),
                });
            }
            let victim = self
                .active
                .iter()
                .enumerate()
                .max_by_key(|(_, r)| r.age_key())
                .map(|(i, _)| i)
                .expect("active set is non-empty");
            let victim_id = self.active[victim].id;
            self.evict(victim);
            evicted.push(victim_id);
            if victim_id == grower {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn evict(&mut self, index: usize) {
        let mut r = self.active.remove(index);
        self.ledger.release(r.id);
        if r.in_decode() {
            let total = r.total_tokens();
            r.num_prefill_tokens = r.num_processed_tokens;
            r.num_decode_tokens = total - r.num_prefill_tokens;
        }
        r.num_processed_tokens = 0;
        r.num_restarts += 1;
        r.admitted_at = None;
        self.pending.push_back(r);
    }

    /// Removes and returns every request, used when a run stops without
    /// draining.
    pub fn take_all(&mut self) -> Vec<Request> {
        let mut out: Vec<Request> = self.active.drain(..).collect();
        out.extend(self.pending.drain(..));
        for r in &out {
            self.ledger.release(r.id);
        }
        self.in_flight = None;
        out
    }

    /// Checks the ledger against each resident request. Test helper.
    pub fn check_ledger(&self) -> std::result::Result<(), String> {
        let mut sum = 0;
        for r in &self.active {
            let resident = r.num_prefill_tokens.max(r.num_processed_tokens);
            let expect = self.ledger.blocks_for(resident);
            let got = self.ledger.allocated(r.id).unwrap_or(0);
            if got != expect {
                return Err(format!(
                    "request {} holds {got} blocks, expected {expect}",
                    r.id
                ));
            }
            sum += got;
        }
        for r in &self.pending {
            if self.ledger.allocated(r.id).is_some() {
                return Err(format!("pending request {} holds blocks", r.id));
            }
        }
        if sum != self.ledger.used() || sum > self.ledger.num_blocks() {
            return Err(format!("ledger sum {sum} vs used {}", self.ledger.used()));
        }
        Ok(())
    }
}
