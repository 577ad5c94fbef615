//! Run configuration and its `config.json` form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoscale::ScalerSpec;
use crate::error::{Result, SimError};
use crate::replica::{ExecutionModel, ReplicaConfig};
use crate::routing::{HraParams, PolicyKind};
use crate::workload::{WorkloadMode, WorkloadSpec};

pub const DEFAULT_MAX_EVENTS: u64 = 100_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Arrival window in simulated seconds.
    pub duration: f64,
    pub num_replicas: usize,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default)]
    pub hra: HraParams,
    #[serde(default)]
    pub replica: ReplicaConfig,
    #[serde(default)]
    pub execution: ExecutionModel,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub autoscaler: Option<ScalerSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Keep simulating past `duration` until every arrived request finishes.
    #[serde(default = "yes")]
    pub drain: bool,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    /// Period of `cluster_log.csv` samples; no samples when unset.
    #[serde(default)]
    pub log_interval: Option<f64>,
}

fn yes() -> bool {
    true
}

fn default_max_events() -> u64 {
    DEFAULT_MAX_EVENTS
}

impl RunConfig {
    /// A small open-loop configuration with every other field at its default.
    pub fn new(num_replicas: usize, duration: f64, target_qps: f64) -> Self {
        RunConfig {
            seed: 0,
            duration,
            num_replicas,
            policy: PolicyKind::default(),
            hra: HraParams::default(),
            replica: ReplicaConfig::default(),
            execution: ExecutionModel::default(),
            workload: WorkloadSpec {
                mode: WorkloadMode::OpenLoop { target_qps },
                interarrival_sigma: 2.0,
                lengths: Default::default(),
                inflation: Default::default(),
            },
            autoscaler: None,
            output_dir: None,
            drain: true,
            max_events: DEFAULT_MAX_EVENTS,
            log_interval: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "duration must be positive and finite, got {}",
                self.duration
            )));
        }
        if self.num_replicas == 0 {
            return Err(SimError::InvalidConfig(
                "num_replicas must be at least 1".into(),
            ));
        }
        if self.max_events == 0 {
            return Err(SimError::InvalidConfig(
                "max_events must be positive".into(),
            ));
        }
        if let Some(dt) = self.log_interval {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(SimError::InvalidConfig(format!(
                    "log_interval {dt} must be positive"
                )));
            }
        }
        self.replica.validate()?;
        self.execution.validate()?;
        self.hra.validate()?;
        if let Some(scaler) = &self.autoscaler {
            scaler.validate()?;
            if !(scaler.min_replicas..=scaler.max_replicas).contains(&self.num_replicas) {
                return Err(SimError::InvalidConfig(format!(
                    "num_replicas {} outside autoscaler bounds [{}, {}]",
                    self.num_replicas, scaler.min_replicas, scaler.max_replicas
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| SimError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| SimError::io(path, e))
    }
}
