//! Cluster-size controllers and GPU-time accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::replica::ReplicaId;
use crate::sim::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalerKind {
    /// Never resizes. Useful as a cost reference.
    Fixed,
    /// Per-instance decode throughput (tokens/s) with a dead band.
    Threshold { high: f64, low: f64 },
    /// Sizes the cluster to `ceil(inflight / target)`.
    Proportional { target_inflight_per_instance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerSpec {
    #[serde(flatten)]
    pub kind: ScalerKind,
    #[serde(default = "default_tick")]
    pub tick_interval: f64,
    #[serde(default = "default_cooldown")]
    pub cooldown: f64,
    pub min_replicas: usize,
    pub max_replicas: usize,
    /// Seconds between adding a replica and it becoming routable.
    #[serde(default)]
    pub startup_delay: f64,
    /// Optional label for reports.
    #[serde(default)]
    pub name: Option<String>,
}

fn default_tick() -> f64 {
    10.0
}
fn default_cooldown() -> f64 {
    60.0
}

impl ScalerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_replicas == 0 || self.min_replicas > self.max_replicas {
            return Err(SimError::InvalidConfig(format!(
                "autoscaler bounds [{}, {}] invalid",
                self.min_replicas, self.max_replicas
            )));
        }
        if !(self.tick_interval > 0.0) || self.cooldown < self.tick_interval {
            return Err(SimError::InvalidConfig(
                "autoscaler needs cooldown >= tick_interval > 0".into(),
            ));
        }
        if !(self.startup_delay >= 0.0) {
            return Err(SimError::InvalidConfig("startup_delay must be >= 0".into()));
        }
        match self.kind {
            ScalerKind::Threshold { high, low } if !(low >= 0.0 && high > low) => {
                Err(SimError::InvalidConfig(format!(
                    "threshold scaler needs high > low >= 0, got {high}/{low}"
                )))
            }
            ScalerKind::Proportional {
                target_inflight_per_instance: t,
            } if !(t > 0.0) => Err(SimError::InvalidConfig(
                "target_inflight_per_instance must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match &self.kind {
            ScalerKind::Fixed => "fixed".into(),
            ScalerKind::Threshold { high, low } => format!("threshold(high={high},low={low})"),
            ScalerKind::Proportional {
                target_inflight_per_instance,
            } => format!("proportional(target={target_inflight_per_instance})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeAction {
    Hold,
    Add(usize),
    Remove(usize),
}

/// Controller state shared by both control laws.
#[derive(Clone, Debug)]
pub struct Autoscaler {
    spec: ScalerSpec,
    last_action: Option<SimTime>,
}

impl Autoscaler {
    pub fn new(spec: ScalerSpec) -> Self {
        Autoscaler {
            spec,
            last_action: None,
        }
    }

    pub fn spec(&self) -> &ScalerSpec {
        &self.spec
    }

    fn cooled(&self, now: SimTime) -> bool {
        self.last_action
            .is_none_or(|t| now - t >= self.spec.cooldown - 1e-9)
    }

    fn act(&mut self, now: SimTime, action: ResizeAction) -> ResizeAction {
        if action != ResizeAction::Hold {
            self.last_action = Some(now);
        }
        action
    }

    /// `throughput` is mean decode tokens/s per live instance over the last
    /// window.
    pub fn tick_threshold(&mut self, now: SimTime, throughput: f64, live: usize) -> ResizeAction {
        let ScalerKind::Threshold { high, low } = self.spec.kind else {
            return ResizeAction::Hold;
        };
        if !self.cooled(now) {
            return ResizeAction::Hold;
        }
        let action = if throughput > high && live < self.spec.max_replicas {
            ResizeAction::Add(1)
        } else if throughput < low && live > self.spec.min_replicas {
            ResizeAction::Remove(1)
        } else {
            ResizeAction::Hold
        };
        self.act(now, action)
    }

    pub fn tick_proportional(
        &mut self,
        now: SimTime,
        inflight_total: usize,
        live: usize,
    ) -> ResizeAction {
        let ScalerKind::Proportional {
            target_inflight_per_instance,
        } = self.spec.kind
        else {
            return ResizeAction::Hold;
        };
        let desired = ((inflight_total as f64 / target_inflight_per_instance).ceil() as usize)
            .clamp(self.spec.min_replicas, self.spec.max_replicas);
        if desired == live || !self.cooled(now) {
            return ResizeAction::Hold;
        }
        let action = if desired > live {
            ResizeAction::Add(desired - live)
        } else {
            ResizeAction::Remove(live - desired)
        };
        self.act(now, action)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalerLogRow {
    pub time: f64,
    pub action: &'static str,
    pub replica_id: ReplicaId,
    pub live_count: usize,
}

pub const SCALER_LOG_HEADER: &str = "time,action,replica_id,live_count";

#[derive(Clone, Copy, Debug)]
struct Lifetime {
    up_since: SimTime,
    draining_since: Option<SimTime>,
    down_at: Option<SimTime>,
}

/// Which replicas exist, which are draining, and the GPU time they used.
#[derive(Clone, Debug, Default)]
pub struct ClusterLedger {
    replicas: BTreeMap<ReplicaId, Lifetime>,
    log: Vec<ScalerLogRow>,
}

impl ClusterLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replicas accepting dispatches.
    pub fn live(&self) -> Vec<ReplicaId> {
        self.replicas
            .iter()
            .filter(|(_, l)| l.down_at.is_none() && l.draining_since.is_none())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.live().len()
    }

    pub fn draining(&self) -> Vec<ReplicaId> {
        self.replicas
            .iter()
            .filter(|(_, l)| l.down_at.is_none() && l.draining_since.is_some())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn is_draining(&self, id: ReplicaId) -> bool {
        self.replicas
            .get(&id)
            .is_some_and(|l| l.down_at.is_none() && l.draining_since.is_some())
    }

    pub fn add(&mut self, id: ReplicaId, at: SimTime) {
        self.replicas.insert(
            id,
            Lifetime {
                up_since: at,
                draining_since: None,
                down_at: None,
            },
        );
        let live_count = self.live_count();
        self.log.push(ScalerLogRow {
            time: at.as_secs(),
            action: "add",
            replica_id: id,
            live_count,
        });
    }

    pub fn start_drain(&mut self, id: ReplicaId, at: SimTime) -> Result<()> {
        let life = self
            .replicas
            .get_mut(&id)
            .filter(|l| l.down_at.is_none())
            .ok_or_else(|| SimError::Scaler(format!("drain of unknown replica {id}")))?;
        if life.draining_since.is_some() {
            return Err(SimError::Scaler(format!(
                "replica {id} is already draining"
            )));
        }
        life.draining_since = Some(at);
        let live_count = self.live_count();
        self.log.push(ScalerLogRow {
            time: at.as_secs(),
            action: "drain",
            replica_id: id,
            live_count,
        });
        Ok(())
    }

    pub fn remove(&mut self, id: ReplicaId, at: SimTime) {
        if let Some(life) = self.replicas.get_mut(&id) {
            life.down_at = Some(at);
        }
        let live_count = self.live_count();
        self.log.push(ScalerLogRow {
            time: at.as_secs(),
            action: "remove",
            replica_id: id,
            live_count,
        });
    }

    /// Exact time-integral of the instance count (live and draining) over
    /// `[0, horizon]`, in GPU hours.
    pub fn gpu_hours(&self, horizon: SimTime) -> f64 {
        self.replicas
            .values()
            .map(|l| {
                let end = l.down_at.unwrap_or(horizon).min(horizon);
                (end - l.up_since).max(0.0)
            })
            .sum::<f64>()
            / 3600.0
    }

    pub fn log(&self) -> &[ScalerLogRow] {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs(s)
    }

    fn threshold() -> Autoscaler {
        Autoscaler::new(ScalerSpec {
            kind: ScalerKind::Threshold {
                high: 100.0,
                low: 20.0,
            },
            tick_interval: 10.0,
            cooldown: 60.0,
            min_replicas: 1,
            max_replicas: 4,
            startup_delay: 0.0,
            name: None,
        })
    }

    fn proportional(target: f64, min: usize, max: usize) -> Autoscaler {
        Autoscaler::new(ScalerSpec {
            kind: ScalerKind::Proportional {
                target_inflight_per_instance: target,
            },
            tick_interval: 10.0,
            cooldown: 60.0,
            min_replicas: min,
            max_replicas: max,
            startup_delay: 0.0,
            name: None,
        })
    }

    #[test]
    fn dead_band_holds() {
        assert_eq!(
            threshold().tick_threshold(t(0.0), 50.0, 2),
            ResizeAction::Hold
        );
    }

    #[test]
    fn cooldown_blocks_second_action() {
        let mut s = threshold();
        assert_eq!(s.tick_threshold(t(0.0), 150.0, 2), ResizeAction::Add(1));
        assert_eq!(s.tick_threshold(t(30.0), 150.0, 3), ResizeAction::Hold);
        assert_eq!(s.tick_threshold(t(60.0), 150.0, 3), ResizeAction::Add(1));
    }

    #[test]
    fn max_replicas_clamps_adds() {
        assert_eq!(
            threshold().tick_threshold(t(0.0), 150.0, 4),
            ResizeAction::Hold
        );
        assert_eq!(
            threshold().tick_threshold(t(0.0), 5.0, 1),
            ResizeAction::Hold
        );
        assert_eq!(
            threshold().tick_threshold(t(0.0), 5.0, 2),
            ResizeAction::Remove(1)
        );
    }

    #[test]
    fn proportional_law() {
        assert_eq!(
            proportional(10.0, 1, 8).tick_proportional(t(0.0), 0, 3),
            ResizeAction::Remove(2)
        );
        assert_eq!(
            proportional(10.0, 1, 8).tick_proportional(t(0.0), 37, 1),
            ResizeAction::Add(3)
        );
        assert_eq!(
            proportional(10.0, 1, 8).tick_proportional(t(0.0), 37, 4),
            ResizeAction::Hold
        );
        assert_eq!(
            proportional(10.0, 1, 8).tick_proportional(t(0.0), 500, 4),
            ResizeAction::Add(4)
        );
    }

    #[test]
    fn proportional_cooldown_is_symmetric() {
        let mut s = proportional(10.0, 1, 8);
        assert_eq!(s.tick_proportional(t(0.0), 40, 1), ResizeAction::Add(3));
        assert_eq!(s.tick_proportional(t(10.0), 80, 4), ResizeAction::Hold);
        assert_eq!(s.tick_proportional(t(60.0), 80, 4), ResizeAction::Add(4));
    }

    #[test]
    fn constant_fleet_gpu_hours() {
        let mut l = ClusterLedger::new();
        for id in 0..4 {
            l.add(id, t(0.0));
        }
        assert!((l.gpu_hours(t(1000.0)) - 4000.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn late_add_costs_half() {
        let mut l = ClusterLedger::new();
        l.add(0, t(0.0));
        l.add(1, t(500.0));
        assert!((l.gpu_hours(t(1000.0)) - 1.5 * 1000.0 / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn drained_replica_accrues_until_removal() {
        let mut l = ClusterLedger::new();
        l.add(0, t(0.0));
        l.add(1, t(100.0));
        l.start_drain(1, t(300.0)).unwrap();
        assert!(l.is_draining(1));
        assert_eq!(l.live(), vec![0]);
        l.remove(1, t(340.0));
        // piecewise: [0,100) 1 gpu, [100,340) 2 gpus, [340,1000) 1 gpu
        let expect = (100.0 + 2.0 * 240.0 + 660.0) / 3600.0;
        assert!((l.gpu_hours(t(1000.0)) - expect).abs() < 1e-12);
        assert!(l.start_drain(1, t(400.0)).is_err());
    }

    #[test]
    fn double_drain_is_an_error() {
        let mut l = ClusterLedger::new();
        l.add(3, t(0.0));
        l.start_drain(3, t(1.0)).unwrap();
        assert!(matches!(l.start_drain(3, t(2.0)), Err(SimError::Scaler(_))));
    }

    #[test]
    fn gpu_hours_is_additive_over_horizons() {
        let mut l = ClusterLedger::new();
        l.add(0, t(0.0));
        l.add(1, t(250.0));
        l.start_drain(1, t(600.0)).unwrap();
        l.remove(1, t(700.0));
        let whole = l.gpu_hours(t(1000.0));
        let first = l.gpu_hours(t(400.0));
        let mut rest = 0.0;
        // [400, 1000]: replica 0 all 600 s, replica 1 for 300 s
        rest += (600.0 + 300.0) / 3600.0;
        assert!((whole - (first + rest)).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut spec = threshold().spec().clone();
        spec.cooldown = 5.0;
        assert!(spec.validate().is_err());
        let mut spec = threshold().spec().clone();
        spec.min_replicas = 5;
        assert!(spec.validate().is_err());
    }
}
