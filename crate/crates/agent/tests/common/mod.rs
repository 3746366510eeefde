#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use probekit_agent::{Agent, AgentClock, AgentConfig, AgentOptions, NetworkProbe};
use probekit_core::builder::{build_package, ExperimentConfig, PluginChoice, SigningKey};
use probekit_core::clock::SimClock;
use probekit_core::model::{OptionValue, UploadPolicy};
use probekit_core::plugin_kit::Registry;
use probekit_service::{RunningServer, ServiceConfig};

pub const T0: i64 = 1_700_000_000_000;
pub const SERVER_TOKEN: &str = "upload-token";

pub fn key() -> SigningKey {
    SigningKey::from_seed([42; 32])
}

pub fn sensor(interval_ms: u64) -> PluginChoice {
    PluginChoice::new("synth_sensor").every(interval_ms)
}

pub fn clock_events() -> PluginChoice {
    let mut p = PluginChoice::new("clock_events");
    p.options
        .insert("monitor_host".into(), OptionValue::Boolean(false));
    p
}

pub fn upload_to(server_url: &str) -> UploadPolicy {
    UploadPolicy {
        enabled: true,
        server_url: server_url.into(),
        unmetered_only: true,
        period_minutes: 1,
        delete_after_ack: true,
    }
}

pub fn config(name: &str, plugins: Vec<PluginChoice>) -> ExperimentConfig {
    ExperimentConfig::new(name, "1.0", "Ada Researcher", plugins)
}

/// Build, sign and write a package; returns its path.
pub fn write_package(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let pkg = build_package(config, &key(), &Registry::builtin(), T0).unwrap();
    let path = dir.join(format!("{}-{}.pkg", config.name, config.version));
    std::fs::write(&path, pkg.to_zip()).unwrap();
    path
}

/// Small chunks so short runs produce several of them.
pub fn agent_config() -> AgentConfig {
    AgentConfig {
        server_token: Some(SERVER_TOKEN.into()),
        chunk_max_age_ms: 10_000,
        cache_flush_interval_ms: 1_000,
        cache_flush_bytes: 4 * 1024,
        chunk_max_uncompressed_bytes: 256 * 1024,
        ..AgentConfig::default()
    }
}

pub fn sim_agent(home: &Path, clock: &SimClock) -> Agent {
    sim_agent_with(home, clock, None)
}

pub fn sim_agent_with(
    home: &Path,
    clock: &SimClock,
    network: Option<Arc<dyn NetworkProbe>>,
) -> Agent {
    let agent = Agent::open(
        home,
        AgentOptions {
            clock: AgentClock::Sim(clock.clone()),
            network,
            config: Some(agent_config()),
        },
    )
    .unwrap();
    agent.trust(&key().public_key()).unwrap();
    agent
}

pub fn start_server(root: &Path) -> RunningServer {
    RunningServer::start(
        ServiceConfig {
            root: root.to_path_buf(),
            token: SERVER_TOKEN.into(),
            quota_bytes: None,
        },
        "127.0.0.1:0",
    )
    .unwrap()
}

/// Every `.zip` under `dir`, recursively.
pub fn zip_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else {
            continue;
        };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n == "quarantine") {
                    continue;
                }
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "zip") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
