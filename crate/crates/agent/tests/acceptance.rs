//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails or overruns its time budget.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use common::*;
use probekit_agent::control::{self, Command, DaemonInfo};
use probekit_agent::{Agent, AgentOptions, ControlToken};
use probekit_core::builder::{
    build_package, BuildError, ExperimentPackage, PluginChoice, PluginsLock,
};
use probekit_core::clock::SimClock;
use probekit_core::energysim::{
    default_params, scenario, scenario_from_manifest, simulate, Load, Scenario,
};
use probekit_core::model::{Capability, ChunkManifest, ExperimentManifest, RecordBody, Violation};
use probekit_core::plugin_kit::{BusEvent, Emission, Registry};
use probekit_core::scheduler::{ExperimentRun, RunOptions, RunState};
use probekit_core::storage::{read_chunk_bytes, read_chunk_file, ChunkStore, Fault, StorageConfig};
use probekit_core::viewer::{export_csv, flatten_payload, merge, Selector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use uuid::Uuid;

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(u32, &str, u64, Check); 9] = [
        (1, "least privilege", 10, least_privilege),
        (2, "package tamper detection", 10, tamper_detection),
        (3, "chunk compression", 30, compression),
        (4, "simulated-clock run accounting", 5, sim_clock_run),
        (5, "end-to-end round trip", 30, round_trip),
        (
            6,
            "upload idempotence and crash safety",
            30,
            upload_crash_safety,
        ),
        (7, "daemon restart restores runs", 10, daemon_restart),
        (8, "energy model shape", 5, energy_model),
        (
            9,
            "chunk integrity and crash-safe sealing",
            10,
            chunk_integrity,
        ),
    ];
    let mut failed = 0;
    for (n, name, budget_s, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(Ok(d)) if secs < budget_s as f64 => (true, d),
            Ok(Ok(d)) => (false, format!("{d}; over the {budget_s} s budget")),
            Ok(Err(e)) => (false, format!("{e:#}")),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} {:<40} {} ({secs:.2} s) {detail}",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn required_caps(registry: &Registry, ids: &[&str]) -> BTreeSet<Capability> {
    ids.iter()
        .flat_map(|id| {
            registry
                .descriptor(id)
                .unwrap()
                .required_capabilities
                .clone()
        })
        .collect()
}

fn least_privilege() -> Result<String> {
    let registry = Registry::builtin();
    let ids: Vec<&str> = registry
        .describe_all()
        .iter()
        .map(|d| d.plugin_id.as_str())
        .collect();
    let home = tempfile::tempdir()?;
    let agent = sim_agent(home.path(), &SimClock::new(T0));
    let mut rng = StdRng::seed_from_u64(0x1ea5_7001);
    let (mut injected, mut full) = (0, 0);
    for i in 0..500 {
        let mask: u32 = rng.random_range(1..(1 << ids.len()));
        let chosen: Vec<&str> = (0..ids.len())
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| ids[b])
            .collect();
        let mut plugins: Vec<_> = chosen.iter().map(|id| PluginChoice::new(*id)).collect();
        for p in &mut plugins {
            if p.plugin_id == "clock_events" {
                p.options.insert(
                    "monitor_host".into(),
                    probekit_core::model::OptionValue::Boolean(false),
                );
            }
        }
        let mut cfg = config(&format!("subset-{i}"), plugins);
        let pkg = build_package(&cfg, &key(), &registry, T0)?;
        let manifest = pkg.manifest()?;
        let union = required_caps(&registry, &chosen);
        ensure!(
            manifest.capabilities == union,
            "subset {chosen:?}: {:?} != {union:?}",
            manifest.capabilities
        );

        let Some(extra) = Capability::ALL.into_iter().find(|c| !union.contains(c)) else {
            full += 1;
            continue;
        };
        let mut wider = union.clone();
        wider.insert(extra);
        cfg.capabilities = Some(wider.clone());
        match build_package(&cfg, &key(), &registry, T0) {
            Err(BuildError::Violations(v))
                if v.iter().any(|x| matches!(x, Violation::OverProvisioned(_))) => {}
            other => bail!(
                "builder accepted extra {extra} for {chosen:?}: {:?}",
                other.map(|_| ())
            ),
        }
        // A correctly signed package that asks for too much is refused too.
        let mut greedy: ExperimentManifest = manifest.clone();
        greedy.capabilities = wider;
        let lock: PluginsLock = pkg.lock()?;
        let mut signed = ExperimentPackage::new(&greedy, &lock);
        signed.sign(&key());
        ensure!(
            agent
                .import_bytes(&signed.to_zip(), probekit_agent::Origin::FileImport)
                .is_err(),
            "agent installed an over-privileged package for {chosen:?}"
        );
        injected += 1;
    }
    ensure!(agent.list().is_empty(), "something got installed");
    Ok(format!("500 subsets exact; {injected} extra-capability injections rejected ({full} subsets already held every capability)"))
}

fn tamper_detection() -> Result<String> {
    let cfg = config("tamper", vec![sensor(50), clock_events()]);
    let pkg = build_package(&cfg, &key(), &Registry::builtin(), T0)?;
    let pubkey = key().public_key();
    let original = pkg.to_zip();
    ExperimentPackage::from_zip(&original)?
        .verify(&pubkey)
        .context("unmodified package")?;
    let mut rng = StdRng::seed_from_u64(0x7a3b);
    for i in 0..200 {
        let mut p = ExperimentPackage::from_zip(&original)?;
        let target = if i % 2 == 0 {
            &mut p.manifest_bytes
        } else {
            &mut p.lock_bytes
        };
        let pos = rng.random_range(0..target.len());
        target[pos] ^= 1 << rng.random_range(0..8);
        let result = ExperimentPackage::from_zip(&p.to_zip()).and_then(|q| q.verify(&pubkey));
        ensure!(result.is_err(), "flip {i} at byte {pos} still verified");
    }
    Ok("200/200 flips rejected, unmodified package verifies".into())
}

fn run_corpus(plugins: Vec<PluginChoice>, minutes: i64) -> Result<Vec<ChunkManifest>> {
    let dir = tempfile::tempdir()?;
    let clock = SimClock::new(T0);
    let mut config = StorageConfig::new(dir.path());
    config.chunk_max_age_ms = 24 * 3_600_000;
    let store = Arc::new(ChunkStore::open(
        config,
        Uuid::new_v4(),
        Uuid::new_v4(),
        Arc::new(clock.clone()),
    )?);
    let manifest = manifest_for(plugins)?;
    let run = ExperimentRun::start(
        &manifest,
        &Registry::builtin(),
        store.clone(),
        Arc::new(clock.clone()),
        RunOptions::default(),
    )?;
    run.run_until(&clock, T0 + minutes * 60_000);
    run.stop()?;
    Ok(store.list_chunks()?)
}

fn manifest_for(plugins: Vec<PluginChoice>) -> Result<ExperimentManifest> {
    Ok(build_package(&config("corpus", plugins), &key(), &Registry::builtin(), T0)?.manifest()?)
}

fn compression() -> Result<String> {
    let ratio = |chunks: &[ChunkManifest]| {
        let c: u64 = chunks.iter().map(|m| m.compressed_bytes).sum();
        let u: u64 = chunks.iter().map(|m| m.uncompressed_bytes).sum();
        c as f64 / u as f64
    };
    let synth = run_corpus(vec![PluginChoice::new("synth_sensor").every(50)], 10)?;
    let mixed = run_corpus(
        vec![
            PluginChoice::new("synth_sensor").every(50),
            PluginChoice::new("sys_cpu").every(1000),
            PluginChoice::new("sys_mem").every(1000),
        ],
        10,
    )?;
    for m in synth.iter().chain(&mixed) {
        ensure!(
            m.record_count >= 10_000,
            "chunk {} holds only {} records",
            m.chunk_id,
            m.record_count
        );
        ensure!(
            m.compression_ratio() <= 0.10,
            "chunk {} ratio {:.4}",
            m.chunk_id,
            m.compression_ratio()
        );
    }
    let (rs, rm) = (ratio(&synth), ratio(&mixed));
    ensure!(
        (0.02..=0.06).contains(&rs),
        "synthetic corpus ratio {rs:.4} outside 2-6%"
    );
    Ok(format!(
        "synthetic {:.2}% over {} records, mixed host+synthetic {:.2}% over {} records, {} chunks each >= 10000 records and <= 10%",
        rs * 100.0,
        synth.iter().map(|m| m.record_count).sum::<u64>(),
        rm * 100.0,
        mixed.iter().map(|m| m.record_count).sum::<u64>(),
        synth.len() + mixed.len()
    ))
}

fn sim_clock_run() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let clock = SimClock::new(T0);
    let mut config = StorageConfig::new(dir.path());
    config.chunk_max_uncompressed_bytes = 32 * 1024;
    config.cache_flush_bytes = 8 * 1024;
    let manifest = manifest_for(vec![
        PluginChoice::new("synth_sensor").every(50),
        PluginChoice::new("sys_mem").every(100),
        clock_events(),
    ])?;
    let store = Arc::new(ChunkStore::open(
        config,
        manifest.experiment_id,
        Uuid::new_v4(),
        Arc::new(clock.clone()),
    )?);
    let run = ExperimentRun::start(
        &manifest,
        &Registry::builtin(),
        store.clone(),
        Arc::new(clock.clone()),
        RunOptions::default(),
    )?;
    let mut published = 0;
    for s in 1..=60 {
        run.run_until(&clock, T0 + s * 1000);
        if s % 7 == 0 {
            run.publish(&BusEvent::clock_jump(s * 10));
            published += 1;
        }
    }
    let state: RunState = run.stop()?;
    let chunks = store.list_chunks()?;
    let stored: u64 = chunks.iter().map(|m| m.record_count).sum();
    ensure!(
        chunks.len() > 1,
        "expected several chunks, got {}",
        chunks.len()
    );
    ensure!(
        stored == state.records_emitted(),
        "chunks hold {stored}, run emitted {}",
        state.records_emitted()
    );
    for (id, interval) in [("synth_sensor", 50), ("sys_mem", 100)] {
        let polls = state.plugins[id].polls_executed as i64;
        let expected = 60_000 / interval;
        ensure!(
            (polls - expected).abs() <= 1,
            "{id}: {polls} polls, expected {expected}"
        );
    }
    ensure!(
        state.plugins["clock_events"].records_emitted == published,
        "event records"
    );

    let merged = merge(
        &Selector::experiment(manifest.experiment_id, vec![dir.path().to_path_buf()]),
        false,
    )?;
    ensure!(
        merged.len() as u64 == stored,
        "merge saw {} records",
        merged.len()
    );
    let keys: Vec<_> = merged
        .records()
        .map(|r| {
            (
                r.record.ts_ms,
                r.device_id,
                r.record.plugin_id.clone(),
                r.record.seq,
            )
        })
        .collect();
    ensure!(
        keys.windows(2).all(|w| w[0] < w[1]),
        "merged output not strictly ordered"
    );
    Ok(format!(
        "{stored} records in {} chunks; polls {} and {}; {published} events; merge strictly ordered",
        chunks.len(),
        state.plugins["synth_sensor"].polls_executed,
        state.plugins["sys_mem"].polls_executed
    ))
}

fn round_trip() -> Result<String> {
    let work = tempfile::tempdir()?;
    let home = tempfile::tempdir()?;
    let root = tempfile::tempdir()?;
    let server = start_server(root.path());
    let mut cfg = config(
        "round-trip",
        vec![
            sensor(50),
            PluginChoice::new("sys_mem").every(1000),
            PluginChoice::new("sys_cpu").every(500),
        ],
    );
    cfg.upload_policy = upload_to(&server.url());
    let path = write_package(work.path(), &cfg);

    let clock = SimClock::new(T0);
    let agent = sim_agent(home.path(), &clock);
    let installed = agent.import(&path)?;
    ensure!(installed.verified, "not verified");
    let id = installed.experiment_id();
    agent.start(id)?;
    agent.advance_to(T0 + 60_000);
    let state = agent.stop(id)?;
    let store = agent.store(id)?;
    let chunks = store.list_chunks()?;
    let n = chunks.len();
    ensure!(n >= 3, "only {n} chunks");

    let mut expected: BTreeMap<(String, i64, u64), Vec<(String, String)>> = BTreeMap::new();
    for m in &chunks {
        for r in read_chunk_file(&store.chunk_path(m.chunk_id)?)?.records {
            let RecordBody::Structured(v) = &r.body else {
                bail!("unexpected blob")
            };
            expected.insert((r.plugin_id.clone(), r.ts_ms, r.seq), flatten_payload(v));
        }
    }
    ensure!(
        expected.len() as u64 == state.records_emitted(),
        "record keys collide"
    );

    let report = agent.upload_now(id)?;
    ensure!(
        report.stored as usize == n && report.deleted as usize == n,
        "upload report {report:?}"
    );
    ensure!(store.list_chunks()?.is_empty(), "local chunks remain");
    let on_server = zip_files(&root.path().join("data"));
    ensure!(
        on_server.len() == n,
        "server holds {} of {n}",
        on_server.len()
    );

    let merged = merge(
        &Selector::experiment(id, vec![root.path().join("data")]),
        false,
    )?;
    ensure!(
        merged.len() == expected.len(),
        "merged {} of {}",
        merged.len(),
        expected.len()
    );
    let out = work.path().join("csv");
    let files = export_csv(&merged, &out)?;
    let mut seen = 0;
    for file in files {
        let plugin = file.file_stem().unwrap().to_string_lossy().into_owned();
        let mut reader = csv::Reader::from_path(&file)?;
        let headers = reader.headers()?.clone();
        for row in reader.records() {
            let row = row?;
            let ts: i64 = row[0].parse()?;
            let seq: u64 = row[2].parse()?;
            ensure!(row[1] == agent.device_id().to_string(), "device column");
            let want = expected
                .get(&(plugin.clone(), ts, seq))
                .with_context(|| format!("{plugin} row {ts}/{seq} has no source record"))?;
            for (k, v) in want {
                let col = headers
                    .iter()
                    .position(|h| h == k)
                    .with_context(|| format!("missing column {k}"))?;
                ensure!(
                    &row[col] == v,
                    "{plugin} {ts} {k}: csv {} != {v}",
                    &row[col]
                );
            }
            seen += 1;
        }
    }
    ensure!(
        seen == expected.len(),
        "csv rows {seen} != {}",
        expected.len()
    );
    Ok(format!(
        "{n} chunks uploaded and deleted locally; {seen} records reproduced through merge and CSV"
    ))
}

fn upload_crash_safety() -> Result<String> {
    let work = tempfile::tempdir()?;
    let home = tempfile::tempdir()?;
    let root = tempfile::tempdir()?;
    let server = start_server(root.path());
    std::fs::write(
        home.path().join("config.json"),
        serde_json::to_vec(&agent_config())?,
    )?;
    let mut cfg = config("crash-upload", vec![sensor(100)]);
    cfg.upload_policy = upload_to(&server.url());
    let path = write_package(work.path(), &cfg);

    let clock = SimClock::new(T0);
    let (id, local) = {
        let agent = sim_agent(home.path(), &clock);
        let id = agent.import(&path)?.experiment_id();
        agent.start(id)?;
        agent.advance_to(T0 + 45_000);
        agent.stop(id)?;
        let store = agent.store(id)?;
        let local: Vec<(ChunkManifest, Vec<u8>)> = store
            .list_chunks()?
            .into_iter()
            .map(|m| {
                let b = std::fs::read(store.chunk_path(m.chunk_id).unwrap()).unwrap();
                (m, b)
            })
            .collect();
        (id, local)
    };
    let n = local.len();
    ensure!(n >= 4, "only {n} chunks");

    // Kill the uploader process between the server's write and the ack.
    let exe = env!("CARGO_BIN_EXE_probekit-agent");
    let status = Process::new(exe)
        .args(["upload", &id.to_string()])
        .env("PROBEKIT_HOME", home.path())
        .env("PROBEKIT_UPLOAD_FAULT", "abort_after_send")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()?;
    ensure!(!status.success(), "uploader was not killed");
    let after_kill = zip_files(&root.path().join("data")).len();
    let agent_dir = |h: &Path| h.join("data").join(id.to_string());
    let local_after_kill = zip_files(&agent_dir(home.path())).len();
    ensure!(
        after_kill == 1 && local_after_kill == n,
        "after kill: server {after_kill}, local {local_after_kill}"
    );

    let out = Process::new(exe)
        .args(["upload", &id.to_string(), "--json"])
        .env("PROBEKIT_HOME", home.path())
        .output()?;
    ensure!(
        out.status.success(),
        "restarted upload failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value = serde_json::from_slice(&out.stdout)?;
    ensure!(
        report["duplicates"] == json!(1),
        "expected one duplicate, got {report}"
    );

    // Re-post every chunk by hand.
    let http: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    for (m, bytes) in &local {
        let url = format!(
            "{}/v1/data/{}/{}/{}",
            server.url(),
            m.experiment_id,
            m.device_id,
            m.chunk_id
        );
        let mut r = http
            .post(&url)
            .header("Authorization", &format!("Bearer {SERVER_TOKEN}"))
            .send(&bytes[..])?;
        let body: Value = serde_json::from_str(&r.body_mut().read_to_string()?)?;
        ensure!(
            r.status().as_u16() == 200 && body["duplicate"] == json!(true),
            "re-post: {body}"
        );
    }

    let stored = zip_files(&root.path().join("data"));
    let ids: BTreeSet<Uuid> = stored
        .iter()
        .map(|p| p.file_stem().unwrap().to_string_lossy().parse().unwrap())
        .collect();
    let want: BTreeSet<Uuid> = local.iter().map(|(m, _)| m.chunk_id).collect();
    ensure!(
        stored.len() == n && ids == want,
        "server holds {} files",
        stored.len()
    );
    for (m, bytes) in &local {
        let p = root.path().join(format!(
            "data/{}/{}/{}.zip",
            m.experiment_id, m.device_id, m.chunk_id
        ));
        ensure!(&std::fs::read(p)? == bytes, "stored copy differs");
    }
    let mut health = http.get(&format!("{}/v1/health", server.url())).call()?;
    let health: Value = serde_json::from_str(&health.body_mut().read_to_string()?)?;
    ensure!(health["chunks_stored"] == json!(n), "health {health}");
    let residue: Vec<_> = walk_files(&agent_dir(home.path()))
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "zip" || e == "tmp"))
        .collect();
    ensure!(residue.is_empty(), "local residue {residue:?}");
    Ok(format!("{n} chunks: killed after first send, restart converged to exactly {n} on the server, 0 local; {n} re-posts deduplicated"))
}

fn walk_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(rd) = std::fs::read_dir(dir) else {
        return out;
    };
    for e in rd.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk_files(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn spawn_daemon(home: &Path) -> Result<(std::process::Child, DaemonInfo)> {
    let _ = std::fs::remove_file(home.join(control::DAEMON_FILE));
    let child = Process::new(env!("CARGO_BIN_EXE_probekit-agent"))
        .arg("daemon")
        .env("PROBEKIT_HOME", home)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?;
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        if let Some(info) = DaemonInfo::load(home) {
            if info.pid == child.id() {
                return Ok((child, info));
            }
        }
        ensure!(Instant::now() < deadline, "daemon did not come up");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn chunk_seqs(dir: &Path) -> Vec<u64> {
    let mut seqs: Vec<u64> = zip_files(dir)
        .iter()
        .filter_map(|p| p.file_name()?.to_str()?.split('-').next()?.parse().ok())
        .collect();
    seqs.sort();
    seqs
}

fn daemon_restart() -> Result<String> {
    let work = tempfile::tempdir()?;
    let home = tempfile::tempdir()?;
    let agent_cfg = probekit_agent::AgentConfig {
        chunk_max_age_ms: 300,
        cache_flush_interval_ms: 100,
        cache_flush_bytes: 1024,
        ..probekit_agent::AgentConfig::default()
    };
    std::fs::write(
        home.path().join("config.json"),
        serde_json::to_vec(&agent_cfg)?,
    )?;
    let path = write_package(work.path(), &config("restart", vec![sensor(50)]));
    let id = {
        let agent = Agent::open(home.path(), AgentOptions::default())?;
        agent.trust(&key().public_key())?;
        agent.import(&path)?.experiment_id()
    };

    let (mut first, info) = spawn_daemon(home.path())?;
    let token = ControlToken::load(&home.path().join("control.token"))?;
    control::send(info.addr, &token, Command::Start { id })?;
    std::thread::sleep(Duration::from_millis(1200));
    first.kill()?;
    first.wait()?;
    let data = home.path().join("data").join(id.to_string());
    let before = chunk_seqs(&data);
    ensure!(
        before.len() >= 2,
        "only {} chunks before the kill",
        before.len()
    );

    let (mut second, info) = spawn_daemon(home.path())?;
    let status: RunState =
        serde_json::from_value(control::send(info.addr, &token, Command::Status { id })?)?;
    ensure!(status.running, "experiment not running after restart");
    std::thread::sleep(Duration::from_millis(1000));
    let stopped: RunState =
        serde_json::from_value(control::send(info.addr, &token, Command::Stop { id })?)?;
    ensure!(!stopped.running, "stop failed");
    control::send(info.addr, &token, Command::Shutdown)?;
    second.wait()?;

    let after = chunk_seqs(&data);
    ensure!(after.len() > before.len(), "no chunks after restart");
    ensure!(
        after == (0..after.len() as u64).collect::<Vec<_>>(),
        "chunk_seq not contiguous: {after:?}"
    );
    Ok(format!(
        "running after restart; chunk_seq 0..{} contiguous ({} before kill)",
        after.len() - 1,
        before.len()
    ))
}

fn energy_model() -> Result<String> {
    let p = default_params::<f64>();
    let avg = |s: &Scenario<f64>| simulate(s, 600_000, &p).map(|r| r.avg_current_ma);
    let idle = avg(&scenario("idle")?)?;
    let idle_wl = avg(&scenario("idle_wl")?)?;
    ensure!(idle_wl - idle == 35.0, "wakelock adds {} mA", idle_wl - idle);
    let a3 = avg(&scenario("a3")?)? / idle_wl;
    let a4 = avg(&scenario("a4")?)? / idle_wl;
    ensure!(a4 >= 2.0, "A4/Idle_wl {a4:.4}");
    ensure!((1.05..=1.25).contains(&a3), "A3/Idle_wl {a3:.4}");

    let mut prev = f64::INFINITY;
    for interval_ms in 20..=5000u64 {
        let s = Scenario::new(
            "sweep",
            vec![Load::Polling {
                interval_ms,
                work_scale: 1.0,
            }],
        );
        let r = simulate(&s, 600_000, &p)?.avg_current_ma;
        ensure!(r <= prev, "drain rose at {interval_ms} ms: {r} > {prev}");
        prev = r;
    }

    let events = manifest_for(vec![
        PluginChoice::new("fs_events"),
        PluginChoice::new("clock_events"),
        PluginChoice::new("activity_state"),
    ])?;
    let ev = avg(&scenario_from_manifest(&events))? / idle;
    ensure!(ev <= 1.01, "event-only ratio {ev:.5}");
    Ok(format!(
        "Idle_wl-Idle = 35.0 mA, A4/Idle_wl {a4:.3}, A3/Idle_wl {a3:.3}, sweep 20..5000 ms non-increasing, event-only/Idle {ev:.5}"
    ))
}

fn chunk_integrity() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let clock = SimClock::new(T0);
    let open = || {
        ChunkStore::open(
            StorageConfig::new(dir.path()),
            Uuid::from_u128(1),
            Uuid::from_u128(2),
            Arc::new(clock.clone()),
        )
    };
    let store = open()?;
    for i in 0..300 {
        clock.advance(50);
        store.append(
            "synth_sensor",
            Emission::Structured(json!({ "value": i, "label": format!("r{i}") })),
        )?;
    }
    store.append(
        "mic",
        Emission::Blob((0..4096u32).map(|i| (i % 251) as u8).collect()),
    )?;
    let m = store.seal_chunk()?.context("nothing sealed")?;
    let bytes = std::fs::read(store.chunk_path(m.chunk_id)?)?;
    read_chunk_bytes(&bytes, "clean")?;
    let mut rng = StdRng::seed_from_u64(0xc4c);
    for i in 0..100 {
        let mut b = bytes.clone();
        let pos = rng.random_range(0..b.len());
        b[pos] ^= 1 << rng.random_range(0..8);
        ensure!(
            read_chunk_bytes(&b, "flipped").is_err(),
            "flip {i} at byte {pos} undetected"
        );
    }

    for i in 0..120 {
        clock.advance(50);
        store.append("synth_sensor", Emission::Structured(json!({ "value": i })))?;
    }
    store.inject_fault(Some(Fault::CrashBeforeRename));
    ensure!(store.seal_chunk().is_err(), "crash not injected");
    drop(store);
    let leftovers: Vec<_> = walk_files(dir.path())
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "zip" || e == "tmp"))
        .collect();
    let store = open()?;
    let after: Vec<_> = walk_files(dir.path())
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "tmp"))
        .collect();
    ensure!(after.is_empty(), "temp files survive reopen: {after:?}");
    ensure!(
        store.list_chunks()?.len() == 1,
        "partial chunk visible after crash ({leftovers:?})"
    );
    for c in store.list_chunks()? {
        read_chunk_file(&store.chunk_path(c.chunk_id)?)?;
    }
    ensure!(
        store.open_record_count() == 120,
        "staged records lost: {}",
        store.open_record_count()
    );
    let resealed = store.seal_chunk()?.context("reseal")?;
    ensure!(
        resealed.record_count == 120 && resealed.chunk_seq == 1,
        "resealed {resealed:?}"
    );
    Ok("100/100 bit flips detected; crash during seal left only complete chunks and resealed all 120 staged records".into())
}
