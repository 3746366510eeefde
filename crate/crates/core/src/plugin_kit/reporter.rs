use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{BlobRef, Capability, LogRecord, RecordBody};
use crate::storage::StorageError;

/// What a plugin hands to its reporter.
#[derive(Clone, Debug, PartialEq)]
pub enum Emission {
    Structured(Value),
    Blob(Vec<u8>),
}

/// Where a record landed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Appended {
    pub ts_ms: i64,
    pub seq: u64,
}

/// Destination for emitted records. Implementations must accept appends from
/// several threads at once.
pub trait RecordSink: Send + Sync {
    fn append(&self, plugin_id: &str, emission: Emission) -> Result<Appended, StorageError>;
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("plugin `{plugin_id}` lacks granted capabilities {missing:?}")]
    CapabilityDenied {
        plugin_id: String,
        missing: BTreeSet<Capability>,
    },
    #[error("reporter is not bound to a plugin")]
    Unbound,
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub type Gate = Arc<dyn Fn() -> bool + Send + Sync>;

/// Handle through which plugin instances emit records into storage.
///
/// An unbound reporter carries the experiment's granted capability set;
/// [`Reporter::bind`] attaches one plugin's identity and requirements.
/// Emissions from a plugin whose requirements exceed the grant are refused.
#[derive(Clone)]
pub struct Reporter {
    sink: Arc<dyn RecordSink>,
    granted: Arc<BTreeSet<Capability>>,
    gate: Option<Gate>,
    binding: Option<Binding>,
}

#[derive(Clone)]
struct Binding {
    plugin_id: Arc<str>,
    required: BTreeSet<Capability>,
    emitted: Arc<AtomicU64>,
    failures: Arc<AtomicU64>,
}

impl Reporter {
    pub fn new(sink: Arc<dyn RecordSink>, granted: BTreeSet<Capability>) -> Self {
        Reporter {
            sink,
            granted: Arc::new(granted),
            gate: None,
            binding: None,
        }
    }

    /// Drop emissions while `gate` returns false.
    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn bind(&self, plugin_id: &str, required: &BTreeSet<Capability>) -> Reporter {
        Reporter {
            binding: Some(Binding {
                plugin_id: plugin_id.into(),
                required: required.clone(),
                emitted: Arc::new(AtomicU64::new(0)),
                failures: Arc::new(AtomicU64::new(0)),
            }),
            ..self.clone()
        }
    }

    pub fn plugin_id(&self) -> Option<&str> {
        self.binding.as_ref().map(|b| &*b.plugin_id)
    }

    /// Records successfully appended through this handle.
    pub fn emitted(&self) -> u64 {
        self.binding
            .as_ref()
            .map_or(0, |b| b.emitted.load(Ordering::SeqCst))
    }

    /// Emissions that failed in storage.
    pub fn failures(&self) -> u64 {
        self.binding
            .as_ref()
            .map_or(0, |b| b.failures.load(Ordering::SeqCst))
    }

    pub fn is_open(&self) -> bool {
        self.gate.as_ref().is_none_or(|g| g())
    }

    /// Append one emission. Returns `None` when the activity gate is closed.
    pub fn emit(&self, emission: Emission) -> Result<Option<Appended>, ReportError> {
        let b = self.binding.as_ref().ok_or(ReportError::Unbound)?;
        let missing: BTreeSet<_> = b.required.difference(&self.granted).copied().collect();
        if !missing.is_empty() {
            return Err(ReportError::CapabilityDenied {
                plugin_id: b.plugin_id.to_string(),
                missing,
            });
        }
        if !self.is_open() {
            return Ok(None);
        }
        match self.sink.append(&b.plugin_id, emission) {
            Ok(a) => {
                b.emitted.fetch_add(1, Ordering::SeqCst);
                Ok(Some(a))
            }
            Err(e) => {
                b.failures.fetch_add(1, Ordering::SeqCst);
                Err(e.into())
            }
        }
    }
}

impl std::fmt::Debug for Reporter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reporter")
            .field("plugin_id", &self.plugin_id())
            .field("granted", &self.granted)
            .finish()
    }
}

/// In-memory sink, mostly for tests and previews.
#[derive(Debug)]
pub struct MemorySink {
    clock: Arc<dyn Clock>,
    records: Mutex<Vec<(LogRecord, Option<Vec<u8>>)>>,
}

impl MemorySink {
    pub fn new(clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(MemorySink {
            clock,
            records: Mutex::new(Vec::new()),
        })
    }

    pub fn records(&self) -> Vec<LogRecord> {
        self.records
            .lock()
            .unwrap()
            .iter()
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RecordSink for MemorySink {
    fn append(&self, plugin_id: &str, emission: Emission) -> Result<Appended, StorageError> {
        let mut records = self.records.lock().unwrap();
        let seq = records.len() as u64;
        let ts_ms = self.clock.now_ms();
        let (body, blob) = match emission {
            Emission::Structured(v) => (RecordBody::Structured(v), None),
            Emission::Blob(bytes) => (
                RecordBody::Blob(BlobRef {
                    blob_name: format!("blobs/{seq:08}.bin"),
                    byte_len: bytes.len() as u64,
                    content_crc32: crc32fast::hash(&bytes),
                }),
                Some(bytes),
            ),
        };
        records.push((
            LogRecord {
                ts_ms,
                plugin_id: plugin_id.into(),
                seq,
                body,
            },
            blob,
        ));
        Ok(Appended { ts_ms, seq })
    }
}
