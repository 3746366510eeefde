use std::collections::BTreeSet;
use std::sync::Arc;

use probekit_core::builder::{
    build_package, compute_capabilities, ExperimentConfig, PluginChoice, SigningKey,
};
use probekit_core::canonical::canonical_json;
use probekit_core::clock::SimClock;
use probekit_core::energysim::{default_params, simulate, Load, Scenario};
use probekit_core::model::{
    canonicalize_manifest, parse_manifest, validate_manifest, Capability, ExperimentManifest,
    RecordBody, Violation,
};
use probekit_core::plugin_kit::{Emission, Registry};
use probekit_core::storage::{ChunkStore, StorageConfig};
use probekit_core::viewer::{flatten_payload, merge, Selector};
use proptest::prelude::*;
use serde_json::{json, Map, Value};
use uuid::Uuid;

const T0: i64 = 1_700_000_000_000;

fn plugin_ids() -> Vec<String> {
    Registry::builtin()
        .describe_all()
        .iter()
        .map(|d| d.plugin_id.clone())
        .collect()
}

/// A valid build config over a non-empty subset of the builtin plugins.
fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    let n = plugin_ids().len();
    (
        prop::collection::btree_set(0..n, 1..=n),
        prop::collection::vec(prop_oneof![Just(None), (20u64..20_000).prop_map(Some)], n),
        "[a-z][a-z0-9-]{0,15}",
        (0u32..20, 0u32..20),
        "[ -~]{0,40}",
    )
        .prop_map(
            move |(picked, intervals, name, (major, minor), description)| {
                let ids = plugin_ids();
                let registry = Registry::builtin();
                let plugins = picked
                    .into_iter()
                    .map(|i| {
                        let mut c = PluginChoice::new(ids[i].clone());
                        let polling =
                            registry.descriptor(&ids[i]).unwrap().kind.to_string() == "polling";
                        if polling {
                            c.interval_ms = intervals[i];
                        }
                        c
                    })
                    .collect();
                let mut cfg =
                    ExperimentConfig::new(&name, &format!("{major}.{minor}"), "Lab", plugins);
                cfg.description = description;
                cfg
            },
        )
}

fn manifest_of(cfg: &ExperimentConfig) -> ExperimentManifest {
    let key = SigningKey::from_seed([3; 32]);
    build_package(cfg, &key, &Registry::builtin(), T0)
        .unwrap()
        .manifest()
        .unwrap()
}

fn arb_scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i64>().prop_map(Value::from),
        any::<bool>().prop_map(Value::from),
        "[ -~]{0,12}".prop_map(Value::from),
        Just(Value::Null),
        prop::collection::vec(any::<i32>(), 0..4).prop_map(|v| json!(v)),
    ]
}

fn arb_payload() -> impl Strategy<Value = Value> {
    prop::collection::btree_map("[a-z]{1,6}", arb_scalar(), 1..6)
        .prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifests_survive_canonical_round_trip(cfg in arb_config()) {
        let m = manifest_of(&cfg);
        let bytes = canonicalize_manifest(&m);
        let back = parse_manifest(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(canonicalize_manifest(&back), bytes.clone());
        let value: Value = serde_json::from_slice(&bytes).unwrap();
        prop_assert_eq!(canonical_json(&value), bytes);
    }

    #[test]
    fn any_field_change_changes_canonical_bytes(cfg in arb_config(), suffix in "[a-z0-9]{1,4}") {
        let m = manifest_of(&cfg);
        let base = canonicalize_manifest(&m);
        let mut renamed = m.clone();
        renamed.name.push_str(&suffix);
        prop_assert_ne!(canonicalize_manifest(&renamed), base.clone());
        let mut described = m.clone();
        described.description.push_str(&suffix);
        prop_assert_ne!(canonicalize_manifest(&described), base.clone());
        let mut later = m;
        later.created_ts += 1;
        prop_assert_ne!(canonicalize_manifest(&later), base);
    }

    #[test]
    fn capabilities_are_exactly_the_union(cfg in arb_config(), extra in 0..Capability::ALL.len()) {
        let registry = Registry::builtin();
        let m = manifest_of(&cfg);
        let union: BTreeSet<Capability> = m
            .plugin_configs
            .iter()
            .flat_map(|p| registry.descriptor(&p.plugin_id).unwrap().required_capabilities.clone())
            .collect();
        prop_assert_eq!(&m.capabilities, &union);
        prop_assert_eq!(compute_capabilities(&m.plugin_configs, &registry).unwrap(), union.clone());
        prop_assert!(validate_manifest(&m, registry.describe_all()).is_empty());

        let cap = Capability::ALL[extra];
        let mut changed = m.clone();
        let expected = if union.contains(&cap) {
            changed.capabilities.remove(&cap);
            Violation::UnderProvisioned([cap].into())
        } else {
            changed.capabilities.insert(cap);
            Violation::OverProvisioned([cap].into())
        };
        prop_assert_eq!(validate_manifest(&changed, registry.describe_all()), vec![expected]);
    }

    #[test]
    fn storage_conserves_records(
        payloads in prop::collection::vec((arb_payload(), 0i64..40, any::<bool>()), 1..120),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::new(T0);
        let mut config = StorageConfig::new(dir.path());
        config.chunk_max_uncompressed_bytes = 4096;
        config.cache_flush_bytes = 512;
        let store = ChunkStore::open(config, Uuid::from_u128(7), Uuid::from_u128(8), Arc::new(clock.clone())).unwrap();
        for (p, dt, seal) in &payloads {
            clock.advance(*dt);
            store.append("synth_sensor", Emission::Structured(p.clone())).unwrap();
            if *seal {
                store.seal_chunk().unwrap();
            }
        }
        store.seal_chunk().unwrap();

        let chunks = store.list_chunks().unwrap();
        let total: u64 = chunks.iter().map(|c| c.record_count).sum();
        prop_assert_eq!(total, payloads.len() as u64);
        let seal_seqs: Vec<u64> = chunks.iter().map(|c| c.chunk_seq).collect();
        prop_assert_eq!(seal_seqs, (0..chunks.len() as u64).collect::<Vec<_>>());

        let mut read = Vec::new();
        for c in &chunks {
            let contents = store.read_chunk(c.chunk_id).unwrap();
            prop_assert_eq!(contents.records.len() as u64, c.record_count);
            let keys: Vec<(i64, u64)> = contents.records.iter().map(|r| (r.ts_ms, r.seq)).collect();
            prop_assert_eq!(keys[0].1, 0);
            prop_assert!(keys.windows(2).all(|w| w[0] < w[1] && w[1].1 == w[0].1 + 1));
            for r in contents.records {
                let RecordBody::Structured(v) = r.body else { panic!("blob") };
                read.push(v);
            }
        }
        let written: Vec<Value> = payloads.into_iter().map(|(p, _, _)| p).collect();
        prop_assert_eq!(read, written);
    }

    #[test]
    fn merge_is_ordered_and_deterministic(
        a in prop::collection::vec((0i64..30, 0u8..3), 1..60),
        b in prop::collection::vec((0i64..30, 0u8..3), 1..60),
    ) {
        let experiment = Uuid::from_u128(99);
        let roots: Vec<_> = [a, b]
            .iter()
            .enumerate()
            .map(|(device, steps)| {
                let dir = tempfile::tempdir().unwrap();
                let clock = SimClock::new(T0);
                let mut config = StorageConfig::new(dir.path());
                config.chunk_max_uncompressed_bytes = 2048;
                config.cache_flush_bytes = 256;
                let store = ChunkStore::open(config, experiment, Uuid::from_u128(device as u128 + 1), Arc::new(clock.clone())).unwrap();
                for (i, (dt, plugin)) in steps.iter().enumerate() {
                    clock.advance(*dt);
                    let id = ["synth_sensor", "sys_cpu", "sys_mem"][*plugin as usize];
                    store.append(id, Emission::Structured(json!({ "i": i }))).unwrap();
                }
                store.seal_chunk().unwrap();
                dir
            })
            .collect();
        let paths: Vec<_> = roots.iter().map(|d| d.path().to_path_buf()).collect();
        let key = |m: &probekit_core::viewer::Merged| {
            m.records()
                .map(|r| (r.record.ts_ms, r.device_id, r.record.plugin_id.clone(), r.record.seq))
                .collect::<Vec<_>>()
        };
        let first = key(&merge(&Selector::experiment(experiment, paths.clone()), false).unwrap());
        let reversed: Vec<_> = paths.iter().rev().cloned().collect();
        let second = key(&merge(&Selector::experiment(experiment, reversed), false).unwrap());
        // Equal keys can only come from different chunks sealed in the same millisecond.
        prop_assert!(first.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(first, second);
    }

    #[test]
    fn flattened_scalars_keep_their_values(payload in arb_payload()) {
        let cells = flatten_payload(&payload);
        let obj = payload.as_object().unwrap();
        prop_assert_eq!(cells.len(), obj.len());
        for (k, cell) in cells {
            let v = &obj[&k];
            let back = match v {
                Value::Null => Value::Null,
                Value::String(_) => Value::String(cell.clone()),
                _ => serde_json::from_str(&cell).unwrap(),
            };
            prop_assert_eq!(&back, v);
        }
    }

    #[test]
    fn drain_never_rises_with_longer_intervals(a in 20u64..60_000, b in 20u64..60_000, scale in 1u32..5) {
        let (short, long) = (a.min(b), a.max(b));
        let p = default_params::<f64>();
        let drain = |interval_ms| {
            let s = Scenario::new("x", vec![Load::Polling { interval_ms, work_scale: scale as f64 }]);
            simulate(&s, 600_000, &p).unwrap().avg_current_ma
        };
        prop_assert!(drain(long) <= drain(short));
    }

    #[test]
    fn adding_a_load_never_lowers_drain(
        intervals in prop::collection::vec(20u64..30_000, 1..5),
        extra in 20u64..30_000,
        rate in 0.0f64..5.0,
    ) {
        let p = default_params::<f64>();
        let loads: Vec<Load<f64>> = intervals
            .iter()
            .map(|&interval_ms| Load::Polling { interval_ms, work_scale: 1.0 })
            .collect();
        let base = simulate(&Scenario::new("base", loads.clone()), 600_000, &p).unwrap().avg_current_ma;
        let mut more = loads.clone();
        more.push(Load::Polling { interval_ms: extra, work_scale: 1.0 });
        let with_poll = simulate(&Scenario::new("poll", more), 600_000, &p).unwrap().avg_current_ma;
        let mut events = loads;
        events.push(Load::Events { rate_hz: rate, work_ms: 2.0 });
        let with_events = simulate(&Scenario::new("events", events), 600_000, &p).unwrap().avg_current_ma;
        prop_assert!(with_poll >= base);
        prop_assert!(with_events >= base);
    }

    #[test]
    fn two_loads_cost_no_more_than_their_increments(
        a in 20u64..30_000,
        b in 20u64..30_000,
        rate in 0.0f64..5.0,
        wakelock in any::<bool>(),
    ) {
        let p = default_params::<f64>();
        let run = |loads: Vec<Load<f64>>| {
            let mut s = Scenario::new("x", loads);
            s.wakelock = wakelock;
            simulate(&s, 600_000, &p).unwrap()
        };
        let first = Load::Polling { interval_ms: a, work_scale: 1.0 };
        let second = Load::Events { rate_hz: rate, work_ms: 2.0 };
        let third = Load::Polling { interval_ms: b, work_scale: 2.0 };
        let base = run(vec![]).avg_current_ma;
        for (x, y) in [(first, second), (first, third), (second, third)] {
            let alone = run(vec![x]).avg_current_ma - base + run(vec![y]).avg_current_ma - base;
            let both = run(vec![x, y]);
            prop_assert!(both.avg_current_ma <= base + alone + 1e-9);
            prop_assert!(both.high_freq_fraction <= both.awake_fraction);
            prop_assert!(both.avg_current_ma >= p.i_sleep_ma);
            prop_assert!(both.avg_current_ma <= p.i_sleep_ma + p.awake_overhead_ma + p.i_cpu_high_ma + 1e-9);
        }
        let again = run(vec![Load::Polling { interval_ms: a, work_scale: 1.0 }]);
        prop_assert_eq!(run(vec![Load::Polling { interval_ms: a, work_scale: 1.0 }]), again);
    }

    #[test]
    fn signatures_bind_to_the_signing_key(seed in any::<[u8; 32]>(), other in any::<[u8; 32]>(), cfg in arb_config()) {
        prop_assume!(seed != other);
        let key = SigningKey::from_seed(seed);
        let pkg = build_package(&cfg, &key, &Registry::builtin(), T0).unwrap();
        prop_assert!(pkg.verify(&key.public_key()).is_ok());
        prop_assert!(pkg.verify(&SigningKey::from_seed(other).public_key()).is_err());
    }
}
