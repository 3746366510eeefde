use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use probekit_core::builder::{ExperimentPackage, PublicKey};
use probekit_core::clock::{Clock, SimClock, SystemClock};
use probekit_core::fsutil::{create_private_dir, write_atomic};
use probekit_core::model::{validate_manifest, DeviceIdentity, ExperimentManifest};
use probekit_core::plugin_kit::Registry;
use probekit_core::scheduler::{ExperimentRun, RunOptions, RunState};
use probekit_core::storage::{ChunkStore, DumpReport};
use uuid::Uuid;

use crate::config::AgentConfig;
use crate::installed::{
    load_running_set, save_running_set, InfoReport, InstallRegistry, InstalledExperiment, Origin,
};
use crate::upload::{backoff_delay_ms, AckLog, UploadFault, UploadReport, Uploader};
use crate::AgentError;

/// Reports whether the current network is metered.
pub trait NetworkProbe: Send + Sync {
    fn is_metered(&self) -> bool;
}

/// A fixed answer, taken from config.
pub struct StaticNetwork(pub bool);

impl NetworkProbe for StaticNetwork {
    fn is_metered(&self) -> bool {
        self.0
    }
}

/// Time source for runs. A simulated clock is stepped by [`Agent::advance_to`].
#[derive(Clone, Debug)]
pub enum AgentClock {
    System,
    Sim(SimClock),
}

pub struct AgentOptions {
    pub clock: AgentClock,
    /// Overrides the config's `network_metered` flag.
    pub network: Option<Arc<dyn NetworkProbe>>,
    /// Overrides `<home>/config.json`.
    pub config: Option<AgentConfig>,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            clock: AgentClock::System,
            network: None,
            config: None,
        }
    }
}

struct ActiveRun {
    run: ExperimentRun,
}

#[derive(Clone, Copy, Debug, Default)]
struct UploadSchedule {
    next_at: i64,
    failures: u32,
}

/// Result of restarting one experiment at daemon startup.
#[derive(Debug)]
pub struct Restored {
    pub experiment_id: Uuid,
    pub outcome: Result<RunState, String>,
}

pub struct Agent {
    home: PathBuf,
    config: AgentConfig,
    device: DeviceIdentity,
    clock: Arc<dyn Clock>,
    sim: Option<SimClock>,
    plugins: Registry,
    network: Arc<dyn NetworkProbe>,
    installed: Mutex<InstallRegistry>,
    running_set: Mutex<BTreeSet<Uuid>>,
    runs: Mutex<HashMap<Uuid, Arc<ActiveRun>>>,
    stores: Mutex<HashMap<Uuid, Arc<ChunkStore>>>,
    locks: Mutex<HashMap<Uuid, Arc<Mutex<()>>>>,
    schedules: Mutex<HashMap<Uuid, UploadSchedule>>,
    upload_fault: Mutex<Option<UploadFault>>,
}

const INSTALLED_FILE: &str = "installed.json";
const RUNNING_FILE: &str = "running.json";

impl Agent {
    pub fn open(home: impl Into<PathBuf>, opts: AgentOptions) -> Result<Self, AgentError> {
        let home = home.into();
        create_private_dir(&home)?;
        for sub in ["packages", "trusted", "runs", "data", "uploads"] {
            create_private_dir(&home.join(sub))?;
        }
        let config = match opts.config {
            Some(c) => c,
            None => AgentConfig::load(&home.join("config.json"))?,
        };
        let device = DeviceIdentity::load_or_create(&home.join("device.json"))?;
        let (clock, sim): (Arc<dyn Clock>, _) = match opts.clock {
            AgentClock::System => (Arc::new(SystemClock), None),
            AgentClock::Sim(s) => (Arc::new(s.clone()), Some(s)),
        };
        let network = opts
            .network
            .unwrap_or_else(|| Arc::new(StaticNetwork(config.network_metered)));
        let installed = InstallRegistry::load(&home.join(INSTALLED_FILE))?;
        let running_set = load_running_set(&home.join(RUNNING_FILE));
        Ok(Agent {
            home,
            config,
            device,
            clock,
            sim,
            plugins: Registry::builtin(),
            network,
            installed: Mutex::new(installed),
            running_set: Mutex::new(running_set),
            runs: Mutex::new(HashMap::new()),
            stores: Mutex::new(HashMap::new()),
            locks: Mutex::new(HashMap::new()),
            schedules: Mutex::new(HashMap::new()),
            upload_fault: Mutex::new(None),
        })
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn device_id(&self) -> Uuid {
        self.device.device_id
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn set_upload_fault(&self, fault: Option<UploadFault>) {
        *self.upload_fault.lock().unwrap() = fault;
    }

    fn lock_for(&self, id: Uuid) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(id).or_default().clone()
    }

    fn state_path(&self, id: Uuid) -> PathBuf {
        self.home.join("runs").join(format!("{id}.json"))
    }

    /// Public keys in `<home>/trusted/*.pub`.
    pub fn trusted_keys(&self) -> Result<Vec<PublicKey>, AgentError> {
        let mut keys = Vec::new();
        for entry in std::fs::read_dir(self.home.join("trusted"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "pub") {
                match PublicKey::load(&path) {
                    Ok(k) => keys.push(k),
                    Err(e) => tracing::warn!(path = %path.display(), error = %e, "ignoring key"),
                }
            }
        }
        Ok(keys)
    }

    /// Trust packages signed by `key`. Returns its fingerprint.
    pub fn trust(&self, key: &PublicKey) -> Result<String, AgentError> {
        let fp = key.fingerprint();
        write_atomic(
            &self.home.join("trusted").join(format!("{fp}.pub")),
            format!("{}\n", key.to_hex()).as_bytes(),
        )?;
        Ok(fp)
    }

    /// Verify a package against the trusted keys and the local plugin
    /// registry.
    fn check_package(&self, pkg: &ExperimentPackage) -> Result<ExperimentManifest, AgentError> {
        let manifest = pkg.verify_trusted(&self.trusted_keys()?)?;
        let violations = validate_manifest(&manifest, self.plugins.describe_all());
        if !violations.is_empty() {
            let text: Vec<_> = violations.iter().map(|v| v.to_string()).collect();
            return Err(AgentError::Invalid(text.join("; ")));
        }
        for entry in pkg.lock()?.plugins {
            let local = self
                .plugins
                .descriptor(&entry.plugin_id)
                .map(|d| d.digest());
            if local.as_deref() != Some(entry.descriptor_digest.as_str()) {
                return Err(AgentError::Invalid(format!(
                    "plugin `{}` differs from the one the package was built against",
                    entry.plugin_id
                )));
            }
        }
        Ok(manifest)
    }

    pub fn import(&self, pkg_path: &Path) -> Result<InstalledExperiment, AgentError> {
        let bytes = std::fs::read(pkg_path)?;
        self.import_bytes(&bytes, Origin::FileImport)
    }

    pub fn import_bytes(
        &self,
        bytes: &[u8],
        origin: Origin,
    ) -> Result<InstalledExperiment, AgentError> {
        let pkg = ExperimentPackage::from_zip(bytes)?;
        let manifest = self.check_package(&pkg)?;
        let id = manifest.experiment_id;
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap();
        if self.runs.lock().unwrap().contains_key(&id) {
            return Err(AgentError::Busy(id));
        }
        let mut installed = self.installed.lock().unwrap();
        if let Some(existing) = installed.get(id) {
            if existing.manifest.version == manifest.version {
                return Err(AgentError::Duplicate {
                    id,
                    version: manifest.version,
                });
            }
        }
        let rel = PathBuf::from("packages")
            .join(id.to_string())
            .join(format!("{}.pkg", sanitize(&manifest.version)));
        write_atomic(&self.home.join(&rel), bytes)?;
        let entry = InstalledExperiment {
            package_path: rel,
            verified: true,
            manifest,
            install_ts: self.clock.now_ms(),
            running: false,
            origin,
        };
        installed.put(entry.clone());
        installed.save()?;
        tracing::info!(experiment = %id, "installed");
        Ok(entry)
    }

    /// Download a published package and import it.
    pub fn fetch(&self, server: &str, id: Uuid) -> Result<InstalledExperiment, AgentError> {
        let url = format!("{}/v1/experiments/{id}", server.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .get(&url)
            .call()
            .map_err(|e| AgentError::Upload(format!("{url}: {e}")))?;
        match resp.status().as_u16() {
            200 => {}
            404 => return Err(AgentError::NotFound(id)),
            s => return Err(AgentError::Upload(format!("{url}: HTTP {s}"))),
        }
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| AgentError::Upload(format!("{url}: {e}")))?;
        self.import_bytes(&bytes, Origin::ServerFetch)
    }

    pub fn list(&self) -> Vec<InstalledExperiment> {
        let running = self.runs.lock().unwrap();
        self.installed
            .lock()
            .unwrap()
            .entries()
            .iter()
            .cloned()
            .map(|mut e| {
                e.running = running.contains_key(&e.experiment_id());
                e
            })
            .collect()
    }

    fn entry(&self, id: Uuid) -> Result<InstalledExperiment, AgentError> {
        let mut e = self
            .installed
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or(AgentError::NotFound(id))?;
        e.running = self.runs.lock().unwrap().contains_key(&id);
        Ok(e)
    }

    pub fn info(&self, id: Uuid) -> Result<InfoReport, AgentError> {
        Ok(InfoReport::new(&self.entry(id)?))
    }

    /// The chunk store of an installed experiment, shared with its run.
    pub fn store(&self, id: Uuid) -> Result<Arc<ChunkStore>, AgentError> {
        self.entry(id)?;
        let mut stores = self.stores.lock().unwrap();
        if let Some(s) = stores.get(&id) {
            return Ok(s.clone());
        }
        let store = Arc::new(ChunkStore::open(
            self.config.storage(self.home.join("data")),
            id,
            self.device.device_id,
            self.clock.clone(),
        )?);
        stores.insert(id, store.clone());
        Ok(store)
    }

    fn launch(&self, id: Uuid, resume: Option<RunState>) -> Result<RunState, AgentError> {
        let entry = self.entry(id)?;
        if !entry.verified {
            return Err(AgentError::Invalid("package is not verified".into()));
        }
        // Re-check the stored copy: files under the agent home are not
        // trusted just because they are there.
        let pkg = ExperimentPackage::read(&self.home.join(&entry.package_path))?;
        let manifest = self.check_package(&pkg)?;
        if manifest != entry.manifest {
            return Err(AgentError::Invalid(
                "stored package differs from the installed manifest".into(),
            ));
        }
        let store = self.store(id)?;
        let run = ExperimentRun::start(
            &manifest,
            &self.plugins,
            store,
            self.clock.clone(),
            RunOptions {
                state_path: Some(self.state_path(id)),
                resume,
                ..RunOptions::default()
            },
        )?;
        if self.sim.is_none() {
            run.spawn_driver();
        }
        let state = run.status();
        self.runs
            .lock()
            .unwrap()
            .insert(id, Arc::new(ActiveRun { run }));
        let mut set = self.running_set.lock().unwrap();
        set.insert(id);
        save_running_set(&self.home.join(RUNNING_FILE), &set)?;
        Ok(state)
    }

    pub fn start(&self, id: Uuid) -> Result<RunState, AgentError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap();
        if self.runs.lock().unwrap().contains_key(&id) {
            return Err(AgentError::AlreadyRunning(id));
        }
        self.launch(id, None)
    }

    /// Stop a running experiment and seal its open chunk. Stopping a stopped
    /// experiment returns its last state.
    pub fn stop(&self, id: Uuid) -> Result<RunState, AgentError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap();
        let active = self.runs.lock().unwrap().remove(&id);
        let Some(active) = active else {
            return self.status(id);
        };
        let state = active.run.stop()?;
        let mut set = self.running_set.lock().unwrap();
        set.remove(&id);
        save_running_set(&self.home.join(RUNNING_FILE), &set)?;
        Ok(state)
    }

    pub fn status(&self, id: Uuid) -> Result<RunState, AgentError> {
        self.entry(id)?;
        if let Some(a) = self.runs.lock().unwrap().get(&id) {
            return Ok(a.run.status());
        }
        match RunState::load(&self.state_path(id)) {
            Ok(mut s) => {
                // A state file saying "running" without a live run is left
                // over from a crash that has not been restored yet.
                s.running = false;
                Ok(s)
            }
            Err(_) => Ok(RunState {
                experiment_id: id,
                started_ts: 0,
                plugins: Default::default(),
                running: false,
                holds_wakelock: false,
                stopped_ts: None,
                error: None,
            }),
        }
    }

    /// Restart every experiment in the persisted running set.
    pub fn restore_running(&self) -> Vec<Restored> {
        let wanted: Vec<Uuid> = self.running_set.lock().unwrap().iter().copied().collect();
        let mut out = Vec::new();
        for id in wanted {
            let lock = self.lock_for(id);
            let _guard = lock.lock().unwrap();
            if self.runs.lock().unwrap().contains_key(&id) {
                continue;
            }
            let resume = RunState::load(&self.state_path(id))
                .ok()
                .filter(|s| s.experiment_id == id);
            let outcome = self.launch(id, resume).map_err(|e| {
                tracing::warn!(experiment = %id, error = %e, "could not restore; marking stopped");
                let mut set = self.running_set.lock().unwrap();
                set.remove(&id);
                let _ = save_running_set(&self.home.join(RUNNING_FILE), &set);
                e.to_string()
            });
            out.push(Restored {
                experiment_id: id,
                outcome,
            });
        }
        out
    }

    /// Step the simulated clock to `end_ms`, firing every run's timers on
    /// time. No-op under the system clock.
    pub fn advance_to(&self, end_ms: i64) {
        let Some(sim) = &self.sim else { return };
        let runs: Vec<_> = self.runs.lock().unwrap().values().cloned().collect();
        loop {
            let next = runs.iter().filter_map(|a| a.run.next_deadline()).min();
            match next {
                Some(t) if t <= end_ms => {
                    if t > sim.now_ms() {
                        sim.set(t);
                    }
                    for a in &runs {
                        a.run.fire_due();
                    }
                }
                _ => break,
            }
        }
        if end_ms > sim.now_ms() {
            sim.set(end_ms);
        }
        for a in &runs {
            a.run.fire_due();
        }
    }

    /// Seal the open chunk of an experiment, whether or not it is running.
    pub fn seal(
        &self,
        id: Uuid,
    ) -> Result<Option<probekit_core::model::ChunkManifest>, AgentError> {
        Ok(self.store(id)?.seal_chunk()?)
    }

    pub fn dump(&self, id: Uuid, dest: &Path) -> Result<DumpReport, AgentError> {
        Ok(self.store(id)?.dump(dest)?)
    }

    /// Upload sealed chunks now, honoring metered-network gating.
    pub fn upload_now(&self, id: Uuid) -> Result<UploadReport, AgentError> {
        let entry = self.entry(id)?;
        let policy = &entry.manifest.upload_policy;
        if !policy.enabled {
            return Err(AgentError::UploadDisabled(id));
        }
        if policy.unmetered_only && self.network.is_metered() {
            return Ok(UploadReport {
                gated: true,
                ..UploadReport::default()
            });
        }
        let token = self.config.server_token()?;
        let store = self.store(id)?;
        let mut acks = AckLog::load(&self.home.join("uploads").join(format!("{id}.json")));
        let uploader = Uploader {
            policy,
            token: token.as_deref(),
            fault: *self.upload_fault.lock().unwrap(),
        };
        uploader.run(&store, &mut acks)
    }

    /// One pass of the background uploader: upload every experiment whose
    /// period has elapsed, backing off after failures.
    pub fn upload_tick(&self) -> Vec<(Uuid, Result<UploadReport, String>)> {
        let now = self.clock.now_ms();
        let mut out = Vec::new();
        for entry in self.list() {
            let id = entry.experiment_id();
            let policy = &entry.manifest.upload_policy;
            if !policy.enabled {
                continue;
            }
            let due = self
                .schedules
                .lock()
                .unwrap()
                .get(&id)
                .is_none_or(|s| s.next_at <= now);
            if !due {
                continue;
            }
            let result = self.upload_now(id);
            let mut schedules = self.schedules.lock().unwrap();
            let s = schedules.entry(id).or_default();
            match &result {
                Ok(_) => {
                    s.failures = 0;
                    s.next_at = now + i64::from(policy.period_minutes) * 60_000;
                }
                Err(_) => {
                    s.failures += 1;
                    s.next_at = now + backoff_delay_ms(s.failures);
                }
            }
            out.push((id, result.map_err(|e| e.to_string())));
        }
        out
    }

    /// Flush every open chunk to its staging area. Runs keep their
    /// "running" mark so a later start resumes them.
    pub fn suspend(&self) {
        let runs: Vec<_> = self.runs.lock().unwrap().drain().collect();
        drop(runs);
        for store in self.stores.lock().unwrap().values() {
            if let Err(e) = store.flush() {
                tracing::warn!(error = %e, "flush failed");
            }
        }
    }
}

fn sanitize(version: &str) -> String {
    version
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-+".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}
