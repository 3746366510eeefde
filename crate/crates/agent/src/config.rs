use std::path::{Path, PathBuf};

use probekit_core::storage::StorageConfig;
use serde::{Deserialize, Serialize};

use crate::AgentError;

/// Agent settings read from `<home>/config.json`. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Whether the current network is metered. Uploads for experiments with
    /// `unmetered_only` are suppressed while this is true.
    pub network_metered: bool,
    /// Address of the control channel. Port 0 picks a free port.
    pub control_addr: String,
    /// Bearer token presented to collection services.
    pub server_token: Option<String>,
    /// File holding the bearer token, read when `server_token` is unset.
    pub server_token_file: Option<PathBuf>,
    pub chunk_max_uncompressed_bytes: u64,
    pub chunk_max_age_ms: i64,
    pub cache_flush_bytes: u64,
    pub cache_flush_interval_ms: i64,
    pub quota_bytes: Option<u64>,
    /// How often the background uploader looks for due work.
    pub upload_tick_ms: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let storage = StorageConfig::default();
        AgentConfig {
            network_metered: false,
            control_addr: "127.0.0.1:0".into(),
            server_token: None,
            server_token_file: None,
            chunk_max_uncompressed_bytes: storage.chunk_max_uncompressed_bytes,
            chunk_max_age_ms: storage.chunk_max_age_ms,
            cache_flush_bytes: storage.cache_flush_bytes,
            cache_flush_interval_ms: storage.cache_flush_interval_ms,
            quota_bytes: storage.quota_bytes,
            upload_tick_ms: 1000,
        }
    }
}

impl AgentConfig {
    /// Load `path`, falling back to defaults when it does not exist.
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| AgentError::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(AgentConfig::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn storage(&self, data_dir: PathBuf) -> StorageConfig {
        StorageConfig {
            data_dir,
            chunk_max_uncompressed_bytes: self.chunk_max_uncompressed_bytes,
            chunk_max_age_ms: self.chunk_max_age_ms,
            cache_flush_bytes: self.cache_flush_bytes,
            cache_flush_interval_ms: self.cache_flush_interval_ms,
            quota_bytes: self.quota_bytes,
        }
    }

    pub fn server_token(&self) -> Result<Option<String>, AgentError> {
        if let Some(t) = &self.server_token {
            return Ok(Some(t.clone()));
        }
        match &self.server_token_file {
            Some(p) => Ok(Some(std::fs::read_to_string(p)?.trim().to_string())),
            None => Ok(None),
        }
    }
}
