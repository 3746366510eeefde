//! Registry of experiments the user has imported.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use probekit_core::fsutil::write_atomic;
use probekit_core::model::{
    Capability, ExperimentManifest, GlobalWakePolicy, PluginKind, UploadPolicy, COARSE_THRESHOLD_MS,
};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::AgentError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    FileImport,
    ServerFetch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstalledExperiment {
    /// Relative to the agent home.
    pub package_path: PathBuf,
    pub verified: bool,
    pub manifest: ExperimentManifest,
    pub install_ts: i64,
    pub running: bool,
    pub origin: Origin,
}

impl InstalledExperiment {
    pub fn experiment_id(&self) -> Uuid {
        self.manifest.experiment_id
    }
}

/// Installed experiments, persisted as one JSON file.
#[derive(Debug, Default)]
pub(crate) struct InstallRegistry {
    path: PathBuf,
    entries: Vec<InstalledExperiment>,
}

impl InstallRegistry {
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let entries = match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(InstallRegistry {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn save(&self) -> Result<(), AgentError> {
        let bytes = serde_json::to_vec_pretty(&self.entries).expect("registry serializes");
        write_atomic(&self.path, &bytes)?;
        Ok(())
    }

    pub fn entries(&self) -> &[InstalledExperiment] {
        &self.entries
    }

    pub fn get(&self, id: Uuid) -> Option<&InstalledExperiment> {
        self.entries.iter().find(|e| e.experiment_id() == id)
    }

    pub fn get_mut(&mut self, id: Uuid) -> Option<&mut InstalledExperiment> {
        self.entries.iter_mut().find(|e| e.experiment_id() == id)
    }

    /// Insert or replace the entry for the same experiment id.
    pub fn put(&mut self, entry: InstalledExperiment) {
        match self.get_mut(entry.experiment_id()) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }
}

/// Set of experiments that should be running, persisted so a restarted
/// daemon can resume them.
pub(crate) fn load_running_set(path: &Path) -> BTreeSet<Uuid> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
            tracing::warn!(path = %path.display(), error = %e, "unreadable running set, starting empty");
            BTreeSet::new()
        }),
        Err(_) => BTreeSet::new(),
    }
}

pub(crate) fn save_running_set(path: &Path, set: &BTreeSet<Uuid>) -> Result<(), AgentError> {
    let bytes = serde_json::to_vec(set).expect("running set serializes");
    write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginSummary {
    pub plugin_id: String,
    pub kind: PluginKind,
    pub interval_ms: Option<u64>,
    pub precise: bool,
}

/// What an installed experiment logs and who signed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub experiment_id: Uuid,
    pub name: String,
    pub version: String,
    pub description: String,
    pub author: String,
    pub key_fingerprint: String,
    pub plugins: Vec<PluginSummary>,
    pub capabilities: BTreeSet<Capability>,
    pub wake_policy: GlobalWakePolicy,
    pub upload_policy: UploadPolicy,
    pub verified: bool,
    pub origin: Origin,
    pub install_ts: i64,
    pub running: bool,
}

impl InfoReport {
    pub fn new(entry: &InstalledExperiment) -> Self {
        let m = &entry.manifest;
        InfoReport {
            experiment_id: m.experiment_id,
            name: m.name.clone(),
            version: m.version.clone(),
            description: m.description.clone(),
            author: m.author_name.clone(),
            key_fingerprint: m.author_key_fingerprint.clone(),
            plugins: m
                .plugin_configs
                .iter()
                .map(|p| PluginSummary {
                    plugin_id: p.plugin_id.clone(),
                    kind: p.kind,
                    interval_ms: p.interval_ms,
                    precise: p.kind == PluginKind::Polling
                        && p.interval_ms.is_some_and(|i| i <= COARSE_THRESHOLD_MS),
                })
                .collect(),
            capabilities: m.capabilities.clone(),
            wake_policy: m.wake_policy,
            upload_policy: m.upload_policy.clone(),
            verified: entry.verified,
            origin: entry.origin,
            install_ts: entry.install_ts,
            running: entry.running,
        }
    }
}

impl fmt::Display for InfoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment   {}", self.experiment_id)?;
        writeln!(f, "name         {} {}", self.name, self.version)?;
        if !self.description.is_empty() {
            writeln!(f, "description  {}", self.description)?;
        }
        writeln!(f, "author       {}", self.author)?;
        writeln!(f, "signed by    {}", self.key_fingerprint)?;
        writeln!(f, "verified     {}", self.verified)?;
        writeln!(f, "running      {}", self.running)?;
        writeln!(f, "plugins")?;
        for p in &self.plugins {
            match p.interval_ms {
                Some(i) if p.kind == PluginKind::Polling => writeln!(
                    f,
                    "  {:<16} polling every {i} ms ({})",
                    p.plugin_id,
                    if p.precise { "precise" } else { "coarse" }
                )?,
                _ => writeln!(f, "  {:<16} event", p.plugin_id)?,
            }
        }
        let caps: Vec<_> = self.capabilities.iter().map(|c| c.as_str()).collect();
        writeln!(f, "capabilities {}", caps.join(", "))?;
        writeln!(
            f,
            "wake policy  wakelocks {}, active only {}",
            if self.wake_policy.allow_wakelocks {
                "allowed"
            } else {
                "forbidden"
            },
            self.wake_policy.active_only
        )?;
        let u = &self.upload_policy;
        if u.enabled {
            write!(
                f,
                "upload       {} every {} min{}{}",
                u.server_url,
                u.period_minutes,
                if u.unmetered_only {
                    ", unmetered only"
                } else {
                    ""
                },
                if u.delete_after_ack {
                    ", delete after ack"
                } else {
                    ""
                }
            )
        } else {
            write!(f, "upload       disabled")
        }
    }
}
