//! Chunk upload with delete-after-ack and retry backoff.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use probekit_core::fsutil::write_atomic;
use probekit_core::model::UploadPolicy;
use probekit_core::storage::ChunkStore;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::AgentError;

pub const BACKOFF_BASE_MS: i64 = 30_000;
pub const BACKOFF_CAP_MS: i64 = 30 * 60_000;

/// Delay before the next attempt after `failures` consecutive failures.
pub fn backoff_delay_ms(failures: u32) -> i64 {
    if failures == 0 {
        return 0;
    }
    let shift = (failures - 1).min(16);
    (BACKOFF_BASE_MS << shift).min(BACKOFF_CAP_MS)
}

/// Where to stop an upload to simulate the uploader dying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UploadFault {
    /// Return [`AgentError::Crashed`] after the first chunk's response
    /// arrives, before the ack is recorded.
    CrashAfterSend,
    /// Abort the whole process at the same point.
    AbortAfterSend,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReport {
    /// Suppressed because the network is metered.
    pub gated: bool,
    pub attempts: u32,
    pub stored: u32,
    pub duplicates: u32,
    pub deleted: u32,
    pub quarantined: Vec<Uuid>,
}

/// Chunk ids already acknowledged by the server. Only needed when chunks
/// are kept after upload.
#[derive(Debug)]
pub(crate) struct AckLog {
    path: PathBuf,
    acked: BTreeSet<Uuid>,
}

impl AckLog {
    pub fn load(path: &Path) -> Self {
        let acked = std::fs::read(path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        AckLog {
            path: path.to_path_buf(),
            acked,
        }
    }

    fn record(&mut self, id: Uuid) -> Result<(), AgentError> {
        if self.acked.insert(id) {
            let bytes = serde_json::to_vec(&self.acked).expect("ack log serializes");
            write_atomic(&self.path, &bytes)?;
        }
        Ok(())
    }
}

pub(crate) struct Uploader<'a> {
    pub policy: &'a UploadPolicy,
    pub token: Option<&'a str>,
    pub fault: Option<UploadFault>,
}

enum Outcome {
    Acked { duplicate: bool },
    Rejected(String),
}

impl Uploader<'_> {
    fn post(&self, agent: &ureq::Agent, url: &str, bytes: &[u8]) -> Result<Outcome, AgentError> {
        let mut req = agent.post(url).header("Content-Type", "application/zip");
        if let Some(t) = self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(bytes)
            .map_err(|e| AgentError::Upload(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        match status {
            200 => {
                let v: serde_json::Value = serde_json::from_str(&body)
                    .map_err(|e| AgentError::Upload(format!("bad ack from {url}: {e}")))?;
                Ok(Outcome::Acked {
                    duplicate: v["duplicate"].as_bool().unwrap_or(false),
                })
            }
            400 => Ok(Outcome::Rejected(body)),
            s => Err(AgentError::Upload(format!("{url}: HTTP {s}: {body}"))),
        }
    }

    /// Post every sealed chunk not yet acknowledged, in sequence order.
    /// Stops at the first transport or server error so the caller can back
    /// off; rejected chunks are quarantined and skipped.
    pub fn run(&self, store: &ChunkStore, acks: &mut AckLog) -> Result<UploadReport, AgentError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        let base = self.policy.server_url.trim_end_matches('/');
        let mut report = UploadReport::default();
        for m in &store.list_chunks()? {
            if acks.acked.contains(&m.chunk_id) {
                if self.policy.delete_after_ack {
                    store.delete_chunk(m.chunk_id)?;
                    report.deleted += 1;
                }
                continue;
            }
            let bytes = std::fs::read(store.chunk_path(m.chunk_id)?)?;
            let url = format!(
                "{base}/v1/data/{}/{}/{}",
                m.experiment_id, m.device_id, m.chunk_id
            );
            report.attempts += 1;
            let outcome = match self.post(&agent, &url, &bytes) {
                Ok(o) => o,
                Err(e) => {
                    tracing::warn!(error = %e, "upload attempt failed");
                    return Err(e);
                }
            };
            match self.fault {
                Some(UploadFault::CrashAfterSend) => return Err(AgentError::Crashed),
                Some(UploadFault::AbortAfterSend) => std::process::abort(),
                None => {}
            }
            match outcome {
                Outcome::Acked { duplicate } => {
                    if duplicate {
                        report.duplicates += 1;
                    } else {
                        report.stored += 1;
                    }
                    if self.policy.delete_after_ack {
                        store.delete_chunk(m.chunk_id)?;
                        report.deleted += 1;
                    } else {
                        acks.record(m.chunk_id)?;
                    }
                }
                Outcome::Rejected(reason) => {
                    tracing::warn!(chunk = %m.chunk_id, %reason, "server rejected chunk, quarantining");
                    store.quarantine_chunk(m.chunk_id)?;
                    report.quarantined.push(m.chunk_id);
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_thirty_seconds_up_to_thirty_minutes() {
        assert_eq!(backoff_delay_ms(0), 0);
        assert_eq!(backoff_delay_ms(1), 30_000);
        assert_eq!(backoff_delay_ms(2), 60_000);
        assert_eq!(backoff_delay_ms(6), 960_000);
        assert_eq!(backoff_delay_ms(7), BACKOFF_CAP_MS);
        assert_eq!(backoff_delay_ms(500), BACKOFF_CAP_MS);
    }
}
