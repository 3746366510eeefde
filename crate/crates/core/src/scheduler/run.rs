use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use tracing::warn;
use uuid::Uuid;

use super::{compute_wake_plan, ActivityTrace, RunState, SchedulerError, WakePlan};
use crate::clock::{Clock, SimClock, COARSE_TOLERANCE_MS, PRECISE_TOLERANCE_MS};
use crate::model::{validate_manifest, ExperimentManifest, PluginKind};
use crate::plugin_kit::{
    BusEvent, EventBus, MemorySink, PluginInstance, PollFailure, RecordSink, Registry, ReportError,
    Reporter,
};
use crate::storage::{ChunkStore, StorageError};

/// A record sink that can also be flushed and sealed when a run stops.
pub trait RunStorage: RecordSink {
    fn flush(&self) -> Result<(), StorageError>;
    fn seal(&self) -> Result<(), StorageError>;
}

impl RunStorage for ChunkStore {
    fn flush(&self) -> Result<(), StorageError> {
        ChunkStore::flush(self).map(|_| ())
    }

    fn seal(&self) -> Result<(), StorageError> {
        self.seal_chunk().map(|_| ())
    }
}

impl RunStorage for MemorySink {
    fn flush(&self) -> Result<(), StorageError> {
        Ok(())
    }

    fn seal(&self) -> Result<(), StorageError> {
        Ok(())
    }
}

pub struct RunOptions {
    /// Where to persist [`RunState`]; nothing is written when `None`.
    pub state_path: Option<PathBuf>,
    /// Activity signal. Defaults to the `activity_state` plugin's trace file
    /// when one is configured, otherwise always active.
    pub activity: Option<ActivityTrace>,
    /// Continue a run from persisted state instead of starting fresh.
    pub resume: Option<RunState>,
    /// Minimum clock time between state-file writes while running.
    pub persist_every_ms: i64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            state_path: None,
            activity: None,
            resume: None,
            persist_every_ms: 1000,
        }
    }
}

struct Timer {
    instance: PluginInstance,
    interval: i64,
    next_due: i64,
    tolerance: i64,
}

struct Core {
    timers: Vec<Timer>,
    events: Vec<PluginInstance>,
    state: RunState,
    base_emitted: BTreeMap<String, u64>,
    last_active: bool,
    last_persist: i64,
}

struct Shared {
    plan: WakePlan,
    clock: Arc<dyn Clock>,
    storage: Arc<dyn RunStorage>,
    bus: Arc<EventBus>,
    activity: Arc<ActivityTrace>,
    active_only: bool,
    state_path: Option<PathBuf>,
    persist_every_ms: i64,
    core: Mutex<Core>,
    wake: Condvar,
    halt: AtomicBool,
}

/// Handle to a started experiment.
pub struct ExperimentRun {
    shared: Arc<Shared>,
    driver: Mutex<Option<JoinHandle<()>>>,
}

impl ExperimentRun {
    /// Instantiate every plugin, subscribe event plugins, arm polling timers
    /// and persist the run as running. Any failure tears down what was
    /// already started.
    pub fn start(
        manifest: &ExperimentManifest,
        registry: &Registry,
        storage: Arc<dyn RunStorage>,
        clock: Arc<dyn Clock>,
        opts: RunOptions,
    ) -> Result<ExperimentRun, SchedulerError> {
        let violations = validate_manifest(manifest, registry.describe_all());
        if !violations.is_empty() {
            return Err(SchedulerError::Invalid(violations));
        }
        let plan = compute_wake_plan(&manifest.plugin_configs, &manifest.wake_policy)?;
        let now = clock.now_ms();

        let activity = match opts.activity {
            Some(a) => a,
            None => trace_from_manifest(manifest)?,
        };
        let activity = Arc::new(activity);
        let (state, base_emitted) = match opts.resume {
            Some(mut s) if s.experiment_id == manifest.experiment_id => {
                s.running = true;
                s.stopped_ts = None;
                s.error = None;
                let base = s
                    .plugins
                    .iter()
                    .map(|(id, c)| (id.clone(), c.records_emitted))
                    .collect();
                (s, base)
            }
            Some(s) => {
                return Err(SchedulerError::State(format!(
                    "state belongs to experiment {}",
                    s.experiment_id
                )))
            }
            None => (
                RunState {
                    experiment_id: manifest.experiment_id,
                    started_ts: now,
                    plugins: BTreeMap::new(),
                    running: true,
                    holds_wakelock: false,
                    stopped_ts: None,
                    error: None,
                },
                BTreeMap::new(),
            ),
        };
        let started_ts = state.started_ts;

        let sink: Arc<dyn RecordSink> = storage.clone();
        let mut reporter = Reporter::new(sink, manifest.capabilities.clone());
        if manifest.wake_policy.active_only {
            let (trace, clock) = (activity.clone(), clock.clone());
            reporter = reporter.with_gate(Arc::new(move || {
                trace.is_active(clock.now_ms() - started_ts)
            }));
        }

        let bus = EventBus::new();
        let mut timers = Vec::new();
        let mut events = Vec::new();
        for cfg in &manifest.plugin_configs {
            let mut instance = registry.instantiate(&cfg.plugin_id, &cfg.options, &reporter)?;
            match cfg.kind {
                PluginKind::Event => {
                    instance.subscribe(&bus)?;
                    events.push(instance);
                }
                PluginKind::Polling => {
                    let interval = cfg.interval_ms.unwrap_or(1000).max(1) as i64;
                    let elapsed = (now - started_ts).max(0);
                    timers.push(Timer {
                        instance,
                        interval,
                        next_due: started_ts + (elapsed / interval + 1) * interval,
                        tolerance: if plan.is_precise(&cfg.plugin_id) {
                            PRECISE_TOLERANCE_MS
                        } else {
                            COARSE_TOLERANCE_MS
                        },
                    });
                }
            }
        }

        let mut state = state;
        for cfg in &manifest.plugin_configs {
            state.plugins.entry(cfg.plugin_id.clone()).or_default();
        }
        state.holds_wakelock = plan.holds_wakelock;
        let last_active = activity.is_active(now - started_ts);

        let shared = Arc::new(Shared {
            plan,
            clock,
            storage,
            bus,
            activity,
            active_only: manifest.wake_policy.active_only,
            state_path: opts.state_path,
            persist_every_ms: opts.persist_every_ms,
            core: Mutex::new(Core {
                timers,
                events,
                state,
                base_emitted,
                last_active,
                last_persist: now,
            }),
            wake: Condvar::new(),
            halt: AtomicBool::new(false),
        });
        {
            let core = shared.core.lock().unwrap();
            shared.persist(&core)?;
        }
        Ok(ExperimentRun {
            shared,
            driver: Mutex::new(None),
        })
    }

    pub fn experiment_id(&self) -> Uuid {
        self.shared.core.lock().unwrap().state.experiment_id
    }

    pub fn plan(&self) -> &WakePlan {
        &self.shared.plan
    }

    pub fn bus(&self) -> &Arc<EventBus> {
        &self.shared.bus
    }

    /// Publish an event to this run's plugins.
    pub fn publish(&self, event: &BusEvent) -> usize {
        self.shared.bus.publish(event)
    }

    pub fn is_running(&self) -> bool {
        self.shared.core.lock().unwrap().state.running
    }

    /// Earliest pending timer deadline or activity transition.
    pub fn next_deadline(&self) -> Option<i64> {
        self.shared.next_deadline(&self.shared.core.lock().unwrap())
    }

    /// Fire every timer due at the clock's current time. Returns the number
    /// of polls executed.
    pub fn fire_due(&self) -> usize {
        let mut core = self.shared.core.lock().unwrap();
        let now = self.shared.clock.now_ms();
        self.shared.fire_due(&mut core, now)
    }

    /// Step `clock` through every deadline up to `end_ms`, firing timers
    /// exactly on time.
    pub fn run_until(&self, clock: &SimClock, end_ms: i64) {
        while let Some(t) = self.next_deadline() {
            if t > end_ms {
                break;
            }
            if t > clock.now_ms() {
                clock.set(t);
            }
            self.fire_due();
        }
        if end_ms > clock.now_ms() {
            clock.set(end_ms);
        }
        self.fire_due();
    }

    /// Drive timers from a background thread against the run's clock.
    pub fn spawn_driver(&self) {
        let mut slot = self.driver.lock().unwrap();
        if slot.is_some() {
            return;
        }
        let shared = self.shared.clone();
        *slot = Some(std::thread::spawn(move || shared.drive()));
    }

    pub fn status(&self) -> RunState {
        self.shared.snapshot(&self.shared.core.lock().unwrap())
    }

    /// Unsubscribe plugins, cancel timers, seal the open chunk and persist
    /// the run as stopped. Stopping again returns the same final state.
    pub fn stop(&self) -> Result<RunState, SchedulerError> {
        {
            let mut core = self.shared.core.lock().unwrap();
            if !core.state.running {
                return Ok(self.shared.snapshot(&core));
            }
            let now = self.shared.clock.now_ms();
            self.shared.halt_core(&mut core, now);
        }
        self.join_driver();
        self.shared.storage.seal()?;
        let core = self.shared.core.lock().unwrap();
        self.shared.persist(&core)?;
        Ok(self.shared.snapshot(&core))
    }

    fn join_driver(&self) {
        self.shared.halt.store(true, Ordering::SeqCst);
        self.shared.wake.notify_all();
        if let Some(h) = self.driver.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

impl Drop for ExperimentRun {
    /// Dropping a run without `stop` behaves like a crash: the state file
    /// still says running and the open chunk stays staged.
    fn drop(&mut self) {
        self.join_driver();
        let mut core = self.shared.core.lock().unwrap();
        for e in &mut core.events {
            e.unsubscribe();
        }
    }
}

impl std::fmt::Debug for ExperimentRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExperimentRun")
            .field("plan", &self.shared.plan)
            .finish_non_exhaustive()
    }
}

impl Shared {
    fn offset(&self, core: &Core, now: i64) -> i64 {
        now - core.state.started_ts
    }

    fn next_deadline(&self, core: &Core) -> Option<i64> {
        if !core.state.running {
            return None;
        }
        let timer = core.timers.iter().map(|t| t.next_due).min();
        let now = self.clock.now_ms();
        let transition = self
            .activity
            .next_transition(self.offset(core, now))
            .map(|o| o + core.state.started_ts);
        match (timer, transition) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn fire_due(&self, core: &mut MutexGuard<'_, Core>, now: i64) -> usize {
        if !core.state.running {
            return 0;
        }
        let active = self.activity.is_active(self.offset(core, now));
        if active != core.last_active {
            core.last_active = active;
            self.bus.publish(&BusEvent::activity(active));
        }
        let gated = self.active_only && !active;

        let mut polls = 0;
        let mut fatal = None;
        let core = &mut **core;
        for t in &mut core.timers {
            if now < t.next_due {
                continue;
            }
            let skipped = (now - t.next_due) / t.interval;
            let latest = t.next_due + skipped * t.interval;
            let counters = core
                .state
                .plugins
                .entry(t.instance.plugin_id().to_string())
                .or_default();
            counters.missed_deadlines += skipped as u64 + u64::from(now - latest > t.tolerance);
            t.next_due = latest + t.interval;
            if gated {
                continue;
            }
            counters.polls_executed += 1;
            counters.last_poll_ts = Some(now);
            polls += 1;
            match t.instance.poll_and_report(now) {
                Ok(_) => {}
                Err(PollFailure::Report(ReportError::Storage(e))) if e.is_fatal() => {
                    fatal = Some(e);
                    break;
                }
                Err(e) => warn!(plugin = t.instance.plugin_id(), %e, "poll failed"),
            }
        }
        if let Some(e) = fatal {
            warn!(%e, "stopping experiment after storage failure");
            core.state.error = Some(e.to_string());
            self.halt_core(core, now);
            let _ = self.storage.seal();
            let _ = self.persist(core);
        } else if now - core.last_persist >= self.persist_every_ms {
            core.last_persist = now;
            if let Err(e) = self.persist(core) {
                warn!(%e, "could not persist run state");
            }
        }
        polls
    }

    fn halt_core(&self, core: &mut Core, now: i64) {
        for e in &mut core.events {
            e.unsubscribe();
        }
        let emitted = self.emitted(core);
        for (id, n) in emitted {
            core.state.plugins.entry(id).or_default().records_emitted = n;
        }
        core.state.running = false;
        core.state.holds_wakelock = false;
        core.state.stopped_ts = Some(now);
        self.wake.notify_all();
    }

    fn emitted(&self, core: &Core) -> Vec<(String, u64)> {
        let instances = core
            .timers
            .iter()
            .map(|t| &t.instance)
            .chain(core.events.iter());
        instances
            .map(|i| {
                let base = core.base_emitted.get(i.plugin_id()).copied().unwrap_or(0);
                (i.plugin_id().to_string(), base + i.reporter().emitted())
            })
            .collect()
    }

    fn snapshot(&self, core: &Core) -> RunState {
        let mut s = core.state.clone();
        if s.running {
            for (id, n) in self.emitted(core) {
                s.plugins.entry(id).or_default().records_emitted = n;
            }
        }
        s
    }

    fn persist(&self, core: &Core) -> Result<(), SchedulerError> {
        match &self.state_path {
            Some(p) => self.snapshot(core).save(p),
            None => Ok(()),
        }
    }

    fn drive(self: Arc<Self>) {
        let mut core = self.core.lock().unwrap();
        loop {
            if self.halt.load(Ordering::SeqCst) || !core.state.running {
                return;
            }
            let now = self.clock.now_ms();
            let next = self.next_deadline(&core);
            if next.is_some_and(|n| n <= now) {
                self.fire_due(&mut core, now);
                continue;
            }
            let wait = next.map_or(1000, |n| n - now).clamp(1, 1000);
            core = self
                .wake
                .wait_timeout(core, Duration::from_millis(wait as u64))
                .unwrap()
                .0;
        }
    }
}

fn trace_from_manifest(m: &ExperimentManifest) -> Result<ActivityTrace, SchedulerError> {
    let path = m
        .plugin("activity_state")
        .and_then(|c| c.options.get("trace_file"))
        .and_then(|v| v.as_text())
        .filter(|p| !p.is_empty());
    match path {
        Some(p) => ActivityTrace::load(std::path::Path::new(p)).map_err(SchedulerError::State),
        None => Ok(ActivityTrace::default()),
    }
}
