use std::sync::Arc;

use tempfile::TempDir;
use uuid::Uuid;

use super::*;
use crate::clock::SimClock;
use crate::model::{Capability, ExperimentManifest, OptionValue, UploadPolicy, SCHEMA_VERSION};
use crate::plugin_kit::{BusEvent, MemorySink, Registry};
use crate::storage::{ChunkStore, StorageConfig};

const T0: i64 = 1_700_000_000_000;

fn manifest(configs: Vec<PluginConfig>) -> ExperimentManifest {
    let registry = Registry::builtin();
    let capabilities = configs
        .iter()
        .flat_map(|c| {
            registry
                .descriptor(&c.plugin_id)
                .unwrap()
                .required_capabilities
                .clone()
        })
        .collect();
    ExperimentManifest {
        schema_version: SCHEMA_VERSION,
        experiment_id: Uuid::from_u128(7),
        name: "sched".into(),
        version: "1".into(),
        author_name: "t".into(),
        author_key_fingerprint: "ab".repeat(32),
        description: String::new(),
        created_ts: T0,
        plugin_configs: configs,
        capabilities,
        wake_policy: GlobalWakePolicy::default(),
        upload_policy: UploadPolicy::default(),
    }
}

fn quiet_clock_events() -> PluginConfig {
    PluginConfig::event("clock_events").with_option("monitor_host", OptionValue::Boolean(false))
}

fn start_mem(
    m: &ExperimentManifest,
    clock: &SimClock,
    opts: RunOptions,
) -> (ExperimentRun, Arc<MemorySink>) {
    let sink = MemorySink::new(Arc::new(clock.clone()));
    let run = ExperimentRun::start(
        m,
        &Registry::builtin(),
        sink.clone(),
        Arc::new(clock.clone()),
        opts,
    )
    .unwrap();
    (run, sink)
}

#[test]
fn event_only_plan_holds_no_wakelock() {
    let plan = compute_wake_plan(
        &[PluginConfig::event("fs_events")],
        &GlobalWakePolicy::default(),
    )
    .unwrap();
    assert_eq!(plan.event_plugins, vec!["fs_events".to_string()]);
    assert!(plan.coarse_polling.is_empty() && plan.precise_polling.is_empty());
    assert!(!plan.holds_wakelock);
}

#[test]
fn long_interval_is_coarse() {
    let plan = compute_wake_plan(
        &[PluginConfig::polling("proc_list", 60_000)],
        &GlobalWakePolicy::default(),
    )
    .unwrap();
    assert_eq!(plan.coarse_polling, vec![("proc_list".to_string(), 60_000)]);
    assert!(!plan.holds_wakelock);
}

#[test]
fn short_interval_is_precise_and_holds_wakelock() {
    let plan = compute_wake_plan(
        &[PluginConfig::polling("synth_sensor", 50)],
        &GlobalWakePolicy::default(),
    )
    .unwrap();
    assert_eq!(plan.precise_polling, vec![("synth_sensor".to_string(), 50)]);
    assert!(plan.holds_wakelock);
}

#[test]
fn threshold_interval_is_precise() {
    let plan = compute_wake_plan(
        &[
            PluginConfig::polling("sys_cpu", COARSE_THRESHOLD_MS),
            PluginConfig::polling("sys_mem", COARSE_THRESHOLD_MS + 1),
        ],
        &GlobalWakePolicy::default(),
    )
    .unwrap();
    assert_eq!(plan.precise_polling.len(), 1);
    assert_eq!(plan.coarse_polling.len(), 1);
}

#[test]
fn precise_timers_without_wakelocks_conflict() {
    let policy = GlobalWakePolicy {
        allow_wakelocks: false,
        active_only: false,
    };
    let err = compute_wake_plan(&[PluginConfig::polling("synth_sensor", 50)], &policy).unwrap_err();
    assert!(
        matches!(err, SchedulerError::WakePolicyConflict(ref p) if p == &["synth_sensor".to_string()])
    );
    let ok = compute_wake_plan(&[PluginConfig::polling("proc_list", 60_000)], &policy).unwrap();
    assert!(!ok.holds_wakelock);
}

#[test]
fn fresh_run_has_zero_counters() {
    let clock = SimClock::new(T0);
    let (run, _) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 100)]),
        &clock,
        RunOptions::default(),
    );
    let s = run.status();
    assert!(s.running);
    assert_eq!(s.polls_executed(), 0);
    assert_eq!(s.records_emitted(), 0);
}

#[test]
fn start_then_stop_cancels_everything() {
    let clock = SimClock::new(T0);
    let (run, sink) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 100)]),
        &clock,
        RunOptions::default(),
    );
    let s = run.stop().unwrap();
    assert!(!s.running);
    assert!(run.next_deadline().is_none());
    clock.advance(10_000);
    assert_eq!(run.fire_due(), 0);
    assert_eq!(sink.len(), 0);
    assert!(!run.status().holds_wakelock);
}

#[test]
fn hundred_ms_timer_fires_ten_times_per_second() {
    let clock = SimClock::new(T0);
    let (run, sink) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 100)]),
        &clock,
        RunOptions::default(),
    );
    run.run_until(&clock, T0 + 1000);
    let c = &run.status().plugins["synth_sensor"];
    assert!((9..=11).contains(&c.polls_executed), "{c:?}");
    assert_eq!(c.records_emitted, sink.len() as u64);
    assert_eq!(c.missed_deadlines, 0);
}

#[test]
fn five_polls_counted_exactly() {
    let clock = SimClock::new(T0);
    let (run, _) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 200)]),
        &clock,
        RunOptions::default(),
    );
    run.run_until(&clock, T0 + 1000);
    assert_eq!(run.status().plugins["synth_sensor"].polls_executed, 5);
}

#[test]
fn snapshots_are_monotone() {
    let clock = SimClock::new(T0);
    let (run, _) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 50)]),
        &clock,
        RunOptions::default(),
    );
    let mut prev = run.status();
    for k in 1..20 {
        run.run_until(&clock, T0 + k * 137);
        let next = run.status();
        assert!(prev.le(&next));
        prev = next;
    }
}

#[test]
fn all_idle_trace_blocks_polls_and_events() {
    let clock = SimClock::new(T0);
    let mut m = manifest(vec![
        PluginConfig::polling("synth_sensor", 100),
        quiet_clock_events(),
    ]);
    m.wake_policy.active_only = true;
    let opts = RunOptions {
        activity: Some(ActivityTrace::always(false)),
        ..Default::default()
    };
    let (run, sink) = start_mem(&m, &clock, opts);
    run.run_until(&clock, T0 + 5000);
    run.publish(&BusEvent::timezone_changed("UTC", "Europe/Rome"));
    let s = run.stop().unwrap();
    assert_eq!(s.polls_executed(), 0);
    assert_eq!(sink.len(), 0);
}

#[test]
fn activity_trace_gates_partially_and_is_logged() {
    let clock = SimClock::new(T0);
    let mut m = manifest(vec![
        PluginConfig::polling("synth_sensor", 100),
        PluginConfig::event("activity_state"),
    ]);
    m.wake_policy.active_only = true;
    let trace = ActivityTrace::parse("0 active\n500 idle\n800 active\n").unwrap();
    let (run, sink) = start_mem(
        &m,
        &clock,
        RunOptions {
            activity: Some(trace),
            ..Default::default()
        },
    );
    run.run_until(&clock, T0 + 1000);
    let polls = run.status().plugins["synth_sensor"].polls_executed;
    // 100..=400 and 800..=1000; the poll at 500 lands after the idle switch.
    assert_eq!(polls, 7);
    let activity: Vec<_> = sink
        .records()
        .into_iter()
        .filter(|r| r.plugin_id == "activity_state")
        .collect();
    assert_eq!(activity.len(), 1);
    assert_eq!(activity[0].payload().unwrap()["state"], "active");
}

#[test]
fn stop_is_idempotent_and_conserves_records() {
    let dir = TempDir::new().unwrap();
    let clock = SimClock::new(T0);
    let m = manifest(vec![
        PluginConfig::polling("synth_sensor", 50),
        PluginConfig::polling("sys_mem", 100),
    ]);
    let store = Arc::new(
        ChunkStore::open(
            StorageConfig::new(dir.path()),
            m.experiment_id,
            Uuid::from_u128(9),
            Arc::new(clock.clone()),
        )
        .unwrap(),
    );
    let run = ExperimentRun::start(
        &m,
        &Registry::builtin(),
        store.clone(),
        Arc::new(clock.clone()),
        RunOptions::default(),
    )
    .unwrap();
    run.run_until(&clock, T0 + 3000);
    let first = run.stop().unwrap();
    let second = run.stop().unwrap();
    assert_eq!(first, second);
    let stored: u64 = store
        .list_chunks()
        .unwrap()
        .iter()
        .map(|c| c.record_count)
        .sum();
    assert_eq!(stored, first.records_emitted());
    assert_eq!(first.plugins["synth_sensor"].polls_executed, 60);
}

#[test]
fn events_produce_one_record_each_with_increasing_ts() {
    let clock = SimClock::new(T0);
    let (run, sink) = start_mem(
        &manifest(vec![quiet_clock_events()]),
        &clock,
        RunOptions::default(),
    );
    run.publish(&BusEvent::timezone_changed("UTC", "Asia/Tokyo"));
    clock.advance(3);
    run.publish(&BusEvent::clock_jump(5000));
    let recs = sink.records();
    assert_eq!(recs.len(), 2);
    assert!(recs[0].ts_ms < recs[1].ts_ms);
    assert_eq!(recs[0].payload().unwrap()["new_zone"], "Asia/Tokyo");
    assert_eq!(run.status().plugins["clock_events"].records_emitted, 2);
    run.stop().unwrap();
    run.publish(&BusEvent::clock_jump(1));
    assert_eq!(sink.len(), 2);
}

#[test]
fn late_firing_records_missed_deadlines_without_catch_up() {
    let clock = SimClock::new(T0);
    let (run, sink) = start_mem(
        &manifest(vec![PluginConfig::polling("synth_sensor", 100)]),
        &clock,
        RunOptions::default(),
    );
    clock.set(T0 + 550);
    assert_eq!(run.fire_due(), 1);
    let c = &run.status().plugins["synth_sensor"];
    assert_eq!(c.polls_executed, 1);
    assert_eq!(c.missed_deadlines, 5);
    assert_eq!(sink.len(), 1);
    assert_eq!(run.next_deadline(), Some(T0 + 600));
}

#[test]
fn invalid_manifest_is_refused() {
    let clock = SimClock::new(T0);
    let mut m = manifest(vec![PluginConfig::polling("synth_sensor", 50)]);
    m.capabilities.insert(Capability::ProcList);
    let sink = MemorySink::new(Arc::new(clock.clone()));
    let err = ExperimentRun::start(
        &m,
        &Registry::builtin(),
        sink,
        Arc::new(clock),
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, SchedulerError::Invalid(_)));
}

#[test]
fn failed_instantiation_tears_down_started_plugins() {
    let clock = SimClock::new(T0);
    let m = manifest(vec![
        quiet_clock_events(),
        PluginConfig::event("fs_events")
            .with_option("path", OptionValue::Text("/definitely/not/here".into())),
    ]);
    let sink = MemorySink::new(Arc::new(clock.clone()));
    assert!(ExperimentRun::start(
        &m,
        &Registry::builtin(),
        sink,
        Arc::new(clock),
        RunOptions::default()
    )
    .is_err());
}

#[test]
fn restart_resumes_with_contiguous_chunks() {
    let dir = TempDir::new().unwrap();
    let state_path = dir.path().join("run.json");
    let clock = SimClock::new(T0);
    let m = manifest(vec![PluginConfig::polling("synth_sensor", 50)]);
    let open_store = || {
        let mut cfg = StorageConfig::new(dir.path().join("data"));
        cfg.chunk_max_age_ms = 10_000;
        cfg.cache_flush_interval_ms = 1000;
        Arc::new(
            ChunkStore::open(
                cfg,
                m.experiment_id,
                Uuid::from_u128(9),
                Arc::new(clock.clone()),
            )
            .unwrap(),
        )
    };
    let opts = || RunOptions {
        state_path: Some(state_path.clone()),
        ..Default::default()
    };

    let store = open_store();
    let run = ExperimentRun::start(
        &m,
        &Registry::builtin(),
        store.clone(),
        Arc::new(clock.clone()),
        opts(),
    )
    .unwrap();
    run.run_until(&clock, T0 + 25_000);
    store.flush().unwrap();
    let before_crash = run.status();
    drop(run);
    drop(store);

    let persisted = RunState::load(&state_path).unwrap();
    assert!(persisted.running);
    let store = open_store();
    let resumed = RunOptions {
        resume: Some(persisted),
        ..opts()
    };
    let run = ExperimentRun::start(
        &m,
        &Registry::builtin(),
        store.clone(),
        Arc::new(clock.clone()),
        resumed,
    )
    .unwrap();
    assert_eq!(run.status().started_ts, T0);
    run.run_until(&clock, T0 + 40_000);
    let fin = run.stop().unwrap();
    assert!(fin.records_emitted() >= before_crash.records_emitted());

    let chunks = store.list_chunks().unwrap();
    let seqs: Vec<u64> = chunks.iter().map(|c| c.chunk_seq).collect();
    assert_eq!(seqs, (0..chunks.len() as u64).collect::<Vec<_>>());
    let stored: u64 = chunks.iter().map(|c| c.record_count).sum();
    assert_eq!(stored, 800);
    assert!(!RunState::load(&state_path).unwrap().running);
}

#[test]
fn realtime_driver_polls_and_stops() {
    use crate::clock::SystemClock;
    let m = manifest(vec![PluginConfig::polling("synth_sensor", 20)]);
    let clock: Arc<dyn crate::clock::Clock> = Arc::new(SystemClock);
    let sink = MemorySink::new(clock.clone());
    let run = ExperimentRun::start(
        &m,
        &Registry::builtin(),
        sink.clone(),
        clock,
        RunOptions::default(),
    )
    .unwrap();
    run.spawn_driver();
    std::thread::sleep(std::time::Duration::from_millis(300));
    let s = run.stop().unwrap();
    let n = sink.len();
    assert!(n >= 5, "only {n} records");
    assert_eq!(s.records_emitted(), n as u64);
    std::thread::sleep(std::time::Duration::from_millis(60));
    assert_eq!(sink.len(), n);
}
