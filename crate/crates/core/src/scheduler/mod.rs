//! Runs experiments: sorts plugins into wake strategies, drives polling
//! timers and event dispatch, and persists run state for restarts.

mod activity;
mod run;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use activity::ActivityTrace;
pub use run::{ExperimentRun, RunOptions, RunStorage};

pub use crate::model::COARSE_THRESHOLD_MS;
use crate::model::{GlobalWakePolicy, PluginConfig, PluginKind, Violation};
use crate::plugin_kit::PluginError;
use crate::storage::StorageError;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("wakelocks are disabled but {0:?} need precise timers")]
    WakePolicyConflict(Vec<String>),
    #[error("manifest is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("run state: {0}")]
    State(String),
}

/// How each plugin keeps the device awake.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WakePlan {
    pub event_plugins: Vec<String>,
    /// Intervals above [`COARSE_THRESHOLD_MS`]: served by low-precision wake-ups.
    pub coarse_polling: Vec<(String, u64)>,
    /// Intervals at or below the threshold: need the device held awake.
    pub precise_polling: Vec<(String, u64)>,
    pub holds_wakelock: bool,
}

impl WakePlan {
    pub fn is_precise(&self, plugin_id: &str) -> bool {
        self.precise_polling.iter().any(|(p, _)| p == plugin_id)
    }
}

pub fn compute_wake_plan(
    configs: &[PluginConfig],
    policy: &GlobalWakePolicy,
) -> Result<WakePlan, SchedulerError> {
    let mut plan = WakePlan::default();
    for c in configs {
        match (c.kind, c.interval_ms) {
            (PluginKind::Event, _) => plan.event_plugins.push(c.plugin_id.clone()),
            (PluginKind::Polling, Some(i)) if i > COARSE_THRESHOLD_MS => {
                plan.coarse_polling.push((c.plugin_id.clone(), i))
            }
            (PluginKind::Polling, i) => plan
                .precise_polling
                .push((c.plugin_id.clone(), i.unwrap_or(COARSE_THRESHOLD_MS))),
        }
    }
    if !policy.allow_wakelocks && !plan.precise_polling.is_empty() {
        return Err(SchedulerError::WakePolicyConflict(
            plan.precise_polling
                .iter()
                .map(|(p, _)| p.clone())
                .collect(),
        ));
    }
    plan.holds_wakelock = !plan.precise_polling.is_empty();
    Ok(plan)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginCounters {
    pub records_emitted: u64,
    pub polls_executed: u64,
    pub last_poll_ts: Option<i64>,
    pub missed_deadlines: u64,
}

/// Snapshot of a run, also the on-disk state used to resume it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub experiment_id: Uuid,
    pub started_ts: i64,
    pub plugins: BTreeMap<String, PluginCounters>,
    pub running: bool,
    #[serde(default)]
    pub holds_wakelock: bool,
    #[serde(default)]
    pub stopped_ts: Option<i64>,
    /// Set when the run stopped on its own, e.g. because storage filled up.
    #[serde(default)]
    pub error: Option<String>,
}

impl RunState {
    pub fn records_emitted(&self) -> u64 {
        self.plugins.values().map(|c| c.records_emitted).sum()
    }

    pub fn polls_executed(&self) -> u64 {
        self.plugins.values().map(|c| c.polls_executed).sum()
    }

    pub fn load(path: &Path) -> Result<RunState, SchedulerError> {
        let bytes = std::fs::read(path).map_err(|e| SchedulerError::State(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| SchedulerError::State(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SchedulerError> {
        let bytes = serde_json::to_vec_pretty(self).expect("run state serializes");
        crate::fsutil::write_atomic(path, &bytes).map_err(|e| SchedulerError::State(e.to_string()))
    }

    /// Pointwise `self <= later` on every counter.
    pub fn le(&self, later: &RunState) -> bool {
        self.plugins.iter().all(|(id, a)| {
            later.plugins.get(id).is_some_and(|b| {
                a.records_emitted <= b.records_emitted
                    && a.polls_executed <= b.polls_executed
                    && a.missed_deadlines <= b.missed_deadlines
                    && a.last_poll_ts <= b.last_poll_ts
            })
        })
    }
}

#[cfg(test)]
mod tests;
