//! The storage manager: timestamps records, buffers them in an internal
//! cache, stages them on disk and seals them into compressed, CRC-protected
//! chunk containers.
//!
//! Layout under `data_dir`:
//!
//! ```text
//! <experiment_id>/<device_id>/<chunk_seq:08>-<chunk_id>.zip   sealed chunks
//! <experiment_id>/<device_id>/.open/                          open chunk staging
//! <experiment_id>/<device_id>/quarantine/                     rejected by a server
//! ```

mod container;

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use container::{
    build_chunk, parse_record_stream, read_chunk_bytes, read_chunk_file, read_chunk_manifest,
    ChunkContents, BLOB_PREFIX, MANIFEST_ENTRY, RECORDS_ENTRY,
};

use crate::clock::Clock;
use crate::fsutil::{create_private_dir, sync_dir, write_atomic};
use crate::model::{BlobRef, ChunkManifest, LogRecord, RecordBody, SCHEMA_VERSION};
use crate::plugin_kit::{Appended, Emission, RecordSink};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage full: {0}")]
    Full(String),
    #[error("chunk {chunk} is corrupt: {reason}")]
    Corrupt { chunk: String, reason: String },
    #[error("chunk {0} not found")]
    NotFound(Uuid),
    #[error("invalid storage config: {0}")]
    Config(String),
    #[error("store stopped after a simulated crash")]
    Crashed,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for StorageError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StorageError::Full(e.to_string())
        } else {
            StorageError::Io(e)
        }
    }
}

impl StorageError {
    /// Errors after which an experiment must stop.
    pub fn is_fatal(&self) -> bool {
        matches!(self, StorageError::Full(_) | StorageError::Crashed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub data_dir: PathBuf,
    pub chunk_max_uncompressed_bytes: u64,
    pub chunk_max_age_ms: i64,
    pub cache_flush_bytes: u64,
    pub cache_flush_interval_ms: i64,
    /// Optional cap on sealed plus staged bytes for one store.
    pub quota_bytes: Option<u64>,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            data_dir: PathBuf::from("data"),
            chunk_max_uncompressed_bytes: 4 * 1024 * 1024,
            chunk_max_age_ms: 900_000,
            cache_flush_bytes: 64 * 1024,
            cache_flush_interval_ms: 5_000,
            quota_bytes: None,
        }
    }
}

impl StorageConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        StorageConfig {
            data_dir: data_dir.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), StorageError> {
        let bad = |m: &str| Err(StorageError::Config(m.into()));
        if self.chunk_max_uncompressed_bytes == 0
            || self.chunk_max_age_ms <= 0
            || self.cache_flush_bytes == 0
            || self.cache_flush_interval_ms <= 0
        {
            return bad("all thresholds must be positive");
        }
        if self.cache_flush_bytes >= self.chunk_max_uncompressed_bytes {
            return bad("cache_flush_bytes must be below chunk_max_uncompressed_bytes");
        }
        if self.cache_flush_interval_ms >= self.chunk_max_age_ms {
            return bad("cache_flush_interval_ms must be below chunk_max_age_ms");
        }
        Ok(())
    }
}

/// Fault injection points for crash-safety tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Stop after the sealed container is written to its temp file but
    /// before the rename that publishes it.
    CrashBeforeRename,
}

#[derive(Debug, Default)]
pub struct DumpReport {
    pub copied: Vec<PathBuf>,
    pub failed: Vec<(Uuid, String)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OpenHeader {
    chunk_id: Uuid,
    chunk_seq: u64,
    opened_ts: i64,
}

#[derive(Debug)]
struct OpenChunk {
    header: OpenHeader,
    next_seq: u64,
    first_ts: Option<i64>,
    last_ts: i64,
    record_count: u64,
    bytes: u64,
    blob_names: Vec<String>,
}

#[derive(Debug)]
struct Inner {
    open: Option<OpenChunk>,
    cache: Vec<u8>,
    last_flush_ms: i64,
    next_chunk_seq: u64,
    sealed_bytes: u64,
    fault: Option<Fault>,
    crashed: bool,
}

/// Chunk storage for one (experiment, device) pair.
#[derive(Debug)]
pub struct ChunkStore {
    config: StorageConfig,
    experiment_id: Uuid,
    device_id: Uuid,
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

const STAGING: &str = ".open";
const QUARANTINE: &str = "quarantine";
/// High-water mark of sealed sequence numbers, so numbering continues after
/// every chunk has been uploaded and deleted.
const NEXT_SEQ: &str = "next_seq";

fn chunk_file_name(seq: u64, id: Uuid) -> String {
    format!("{seq:08}-{id}.zip")
}

fn parse_chunk_file_name(name: &str) -> Option<(u64, Uuid)> {
    let stem = name.strip_suffix(".zip")?;
    let (seq, id) = stem.split_once('-')?;
    Some((seq.parse().ok()?, id.parse().ok()?))
}

impl ChunkStore {
    /// Open (or create) the store, recovering any staged open chunk and
    /// discarding temp files left by an interrupted seal.
    pub fn open(
        config: StorageConfig,
        experiment_id: Uuid,
        device_id: Uuid,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StorageError> {
        config.validate()?;
        create_private_dir(&config.data_dir)?;
        let dir = config
            .data_dir
            .join(experiment_id.to_string())
            .join(device_id.to_string());
        create_private_dir(&dir)?;

        let mut next_chunk_seq = 0;
        let mut sealed_bytes = 0;
        let mut sealed_ids = BTreeSet::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".tmp") {
                fs::remove_file(entry.path())?;
            } else if let Some((seq, id)) = parse_chunk_file_name(&name) {
                next_chunk_seq = next_chunk_seq.max(seq + 1);
                sealed_bytes += entry.metadata()?.len();
                sealed_ids.insert(id);
            }
        }
        for entry in fs::read_dir(dir.join(QUARANTINE))
            .into_iter()
            .flatten()
            .flatten()
        {
            if let Some((seq, _)) = parse_chunk_file_name(&entry.file_name().to_string_lossy()) {
                next_chunk_seq = next_chunk_seq.max(seq + 1);
            }
        }

        if let Some(n) = fs::read_to_string(dir.join(NEXT_SEQ))
            .ok()
            .and_then(|t| t.trim().parse::<u64>().ok())
        {
            next_chunk_seq = next_chunk_seq.max(n);
        }

        let now = clock.now_ms();
        let open = recover_staging(&dir.join(STAGING), &sealed_ids)?;
        if let Some(o) = &open {
            next_chunk_seq = next_chunk_seq.max(o.header.chunk_seq);
        }
        Ok(ChunkStore {
            config,
            experiment_id,
            device_id,
            dir,
            clock,
            inner: Mutex::new(Inner {
                open,
                cache: Vec::new(),
                last_flush_ms: now,
                next_chunk_seq,
                sealed_bytes,
                fault: None,
                crashed: false,
            }),
        })
    }

    pub fn experiment_id(&self) -> Uuid {
        self.experiment_id
    }

    pub fn device_id(&self) -> Uuid {
        self.device_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &StorageConfig {
        &self.config
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<Fault>) {
        self.inner.lock().unwrap().fault = fault;
    }

    /// Records in the open (unsealed) chunk, cached or staged.
    pub fn open_record_count(&self) -> u64 {
        let inner = self.inner.lock().unwrap();
        inner.open.as_ref().map_or(0, |o| o.record_count)
    }

    /// Bytes currently held in the in-memory cache.
    pub fn cached_bytes(&self) -> usize {
        self.inner.lock().unwrap().cache.len()
    }

    /// Timestamp, sequence and buffer one record.
    pub fn append(&self, plugin_id: &str, emission: Emission) -> Result<Appended, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.crashed {
            return Err(StorageError::Crashed);
        }
        let now = self.clock.now_ms();

        let rotate = inner.open.as_ref().is_some_and(|o| {
            o.record_count > 0
                && (now - o.header.opened_ts >= self.config.chunk_max_age_ms
                    || o.bytes >= self.config.chunk_max_uncompressed_bytes)
        });
        if rotate {
            self.seal_locked(&mut inner)?;
        }

        let incoming = match &emission {
            Emission::Blob(b) => b.len() as u64,
            Emission::Structured(_) => 0,
        };
        if let Some(quota) = self.config.quota_bytes {
            let staged = inner.open.as_ref().map_or(0, |o| o.bytes);
            if inner.sealed_bytes + staged + incoming > quota {
                return Err(StorageError::Full(format!(
                    "quota of {quota} bytes exhausted in {}",
                    self.dir.display()
                )));
            }
        }

        if inner.open.is_none() {
            let header = OpenHeader {
                chunk_id: Uuid::new_v4(),
                chunk_seq: inner.next_chunk_seq,
                opened_ts: now,
            };
            let staging = self.dir.join(STAGING);
            create_private_dir(&staging.join("blobs"))?;
            write_atomic(
                &staging.join("open.json"),
                &serde_json::to_vec(&header).expect("header serializes"),
            )?;
            inner.open = Some(OpenChunk {
                header,
                next_seq: 0,
                first_ts: None,
                last_ts: 0,
                record_count: 0,
                bytes: 0,
                blob_names: Vec::new(),
            });
        }

        let open = inner.open.as_mut().expect("open chunk");
        let ts_ms = now.max(open.last_ts);
        let seq = open.next_seq;
        let body = match emission {
            Emission::Structured(v) => RecordBody::Structured(v),
            Emission::Blob(bytes) => {
                let blob_name = format!("{BLOB_PREFIX}{seq:08}.bin");
                fs::write(self.dir.join(STAGING).join(&blob_name), &bytes)?;
                open.blob_names.push(blob_name.clone());
                RecordBody::Blob(BlobRef {
                    blob_name,
                    byte_len: bytes.len() as u64,
                    content_crc32: crc32fast::hash(&bytes),
                })
            }
        };
        let record = LogRecord {
            ts_ms,
            plugin_id: plugin_id.to_string(),
            seq,
            body,
        };
        let mut line = record.to_json_line().into_bytes();
        line.push(b'\n');

        open.next_seq += 1;
        open.first_ts.get_or_insert(ts_ms);
        open.last_ts = ts_ms;
        open.record_count += 1;
        open.bytes += line.len() as u64 + incoming;
        inner.cache.extend_from_slice(&line);

        if inner.cache.len() as u64 >= self.config.cache_flush_bytes
            || now - inner.last_flush_ms >= self.config.cache_flush_interval_ms
        {
            self.flush_locked(&mut inner)?;
        }
        Ok(Appended { ts_ms, seq })
    }

    /// Drain the cache to the open chunk's staging file.
    pub fn flush(&self) -> Result<u64, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.crashed {
            return Err(StorageError::Crashed);
        }
        self.flush_locked(&mut inner)
    }

    fn flush_locked(&self, inner: &mut Inner) -> Result<u64, StorageError> {
        inner.last_flush_ms = self.clock.now_ms();
        if inner.cache.is_empty() {
            return Ok(0);
        }
        let path = self.dir.join(STAGING).join(RECORDS_ENTRY);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&inner.cache)?;
        f.sync_data()?;
        let n = inner.cache.len() as u64;
        inner.cache.clear();
        Ok(n)
    }

    /// Seal the open chunk into a container. Returns `None` when there is
    /// nothing to seal.
    pub fn seal_chunk(&self) -> Result<Option<ChunkManifest>, StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.crashed {
            return Err(StorageError::Crashed);
        }
        self.seal_locked(&mut inner)
    }

    fn seal_locked(&self, inner: &mut Inner) -> Result<Option<ChunkManifest>, StorageError> {
        self.flush_locked(inner)?;
        let Some(open) = inner.open.as_ref() else {
            return Ok(None);
        };
        if open.record_count == 0 {
            return Ok(None);
        }
        let staging = self.dir.join(STAGING);
        let records = fs::read(staging.join(RECORDS_ENTRY))?;
        let mut blobs = Vec::with_capacity(open.blob_names.len());
        for name in &open.blob_names {
            blobs.push((name.clone(), fs::read(staging.join(name))?));
        }
        let mut manifest = ChunkManifest {
            chunk_id: open.header.chunk_id,
            experiment_id: self.experiment_id,
            device_id: self.device_id,
            chunk_seq: open.header.chunk_seq,
            first_ts: open.first_ts.unwrap_or(open.last_ts),
            last_ts: open.last_ts,
            record_count: open.record_count,
            blob_count: blobs.len() as u64,
            records_crc32: crc32fast::hash(&records),
            uncompressed_bytes: 0,
            compressed_bytes: 0,
            schema_version: SCHEMA_VERSION,
        };
        let bytes = build_chunk(&mut manifest, &records, &blobs)?;

        let path = self
            .dir
            .join(chunk_file_name(manifest.chunk_seq, manifest.chunk_id));
        let tmp = crate::fsutil::temp_path(&path);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        if inner.fault == Some(Fault::CrashBeforeRename) {
            inner.crashed = true;
            return Err(StorageError::Crashed);
        }
        fs::rename(&tmp, &path)?;
        sync_dir(&self.dir);
        write_atomic(
            &self.dir.join(NEXT_SEQ),
            (manifest.chunk_seq + 1).to_string().as_bytes(),
        )?;
        fs::remove_dir_all(&staging)?;

        inner.sealed_bytes += bytes.len() as u64;
        inner.next_chunk_seq = manifest.chunk_seq + 1;
        inner.open = None;
        Ok(Some(manifest))
    }

    fn sealed_files(&self) -> Result<Vec<(u64, Uuid, PathBuf)>, StorageError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if let Some((seq, id)) = parse_chunk_file_name(&entry.file_name().to_string_lossy()) {
                out.push((seq, id, entry.path()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Sealed chunks ordered by `chunk_seq`.
    pub fn list_chunks(&self) -> Result<Vec<ChunkManifest>, StorageError> {
        self.sealed_files()?
            .iter()
            .map(|(_, _, p)| read_chunk_manifest(p))
            .collect()
    }

    pub fn chunk_path(&self, chunk_id: Uuid) -> Result<PathBuf, StorageError> {
        self.sealed_files()?
            .into_iter()
            .find(|(_, id, _)| *id == chunk_id)
            .map(|(_, _, p)| p)
            .ok_or(StorageError::NotFound(chunk_id))
    }

    /// Read a sealed chunk, verifying its checksums first.
    pub fn read_chunk(&self, chunk_id: Uuid) -> Result<ChunkContents, StorageError> {
        let path = self.chunk_path(chunk_id)?;
        let bytes = fs::read(&path)?;
        read_chunk_bytes(&bytes, &chunk_id.to_string())
    }

    /// Remove a sealed chunk. Deleting an absent chunk is a no-op.
    pub fn delete_chunk(&self, chunk_id: Uuid) -> Result<(), StorageError> {
        match self.chunk_path(chunk_id) {
            Ok(path) => {
                let len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                fs::remove_file(&path)?;
                sync_dir(&self.dir);
                let mut inner = self.inner.lock().unwrap();
                inner.sealed_bytes = inner.sealed_bytes.saturating_sub(len);
                Ok(())
            }
            Err(StorageError::NotFound(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Move a chunk aside so it is neither listed nor deleted.
    pub fn quarantine_chunk(&self, chunk_id: Uuid) -> Result<PathBuf, StorageError> {
        let path = self.chunk_path(chunk_id)?;
        let qdir = self.dir.join(QUARANTINE);
        create_private_dir(&qdir)?;
        let dest = qdir.join(path.file_name().expect("chunk file name"));
        fs::rename(&path, &dest)?;
        sync_dir(&self.dir);
        Ok(dest)
    }

    /// Copy every sealed chunk to `dest_dir/<experiment>/<device>/`.
    /// Private copies stay in place.
    pub fn dump(&self, dest_dir: &Path) -> Result<DumpReport, StorageError> {
        let target = dest_dir
            .join(self.experiment_id.to_string())
            .join(self.device_id.to_string());
        fs::create_dir_all(&target)?;
        let mut report = DumpReport::default();
        for (_, id, path) in self.sealed_files()? {
            let dest = target.join(path.file_name().expect("chunk file name"));
            match fs::read(&path).and_then(|b| write_atomic(&dest, &b)) {
                Ok(()) => report.copied.push(dest),
                Err(e) => report.failed.push((id, e.to_string())),
            }
        }
        Ok(report)
    }
}

impl RecordSink for ChunkStore {
    fn append(&self, plugin_id: &str, emission: Emission) -> Result<Appended, StorageError> {
        ChunkStore::append(self, plugin_id, emission)
    }
}

/// Rebuild open-chunk state from the staging directory. Drops a torn final
/// line and any staging that was already sealed.
fn recover_staging(
    staging: &Path,
    sealed: &BTreeSet<Uuid>,
) -> Result<Option<OpenChunk>, StorageError> {
    let header: OpenHeader = match fs::read(staging.join("open.json")) {
        Ok(b) => match serde_json::from_slice(&b) {
            Ok(h) => h,
            Err(_) => {
                fs::remove_dir_all(staging)?;
                return Ok(None);
            }
        },
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            if staging.exists() {
                fs::remove_dir_all(staging)?;
            }
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    if sealed.contains(&header.chunk_id) {
        fs::remove_dir_all(staging)?;
        return Ok(None);
    }
    let records_path = staging.join(RECORDS_ENTRY);
    let mut stream = match fs::read(&records_path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let keep = stream
        .iter()
        .rposition(|&b| b == b'\n')
        .map_or(0, |i| i + 1);
    if keep < stream.len() {
        stream.truncate(keep);
        fs::write(&records_path, &stream)?;
    }
    let records = parse_record_stream(&stream).map_err(|reason| StorageError::Corrupt {
        chunk: header.chunk_id.to_string(),
        reason,
    })?;
    if records.is_empty() {
        fs::remove_dir_all(staging)?;
        return Ok(None);
    }
    let mut bytes = stream.len() as u64;
    let mut blob_names = Vec::new();
    for r in &records {
        if let Some(b) = r.blob_ref() {
            bytes += b.byte_len;
            blob_names.push(b.blob_name.clone());
        }
    }
    let last = records.last().expect("non-empty");
    Ok(Some(OpenChunk {
        next_seq: last.seq + 1,
        first_ts: Some(records[0].ts_ms),
        last_ts: last.ts_ms,
        record_count: records.len() as u64,
        bytes,
        blob_names,
        header,
    }))
}
