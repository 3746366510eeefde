//! The log viewer: previews, merges and converts collected chunks.
//!
//! Records are merged on raw `ts_ms`; clock skew between devices is not
//! reconciled. Ties are broken by device id, plugin id and sequence number.

mod export;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use uuid::Uuid;

pub use export::{export_csv, extract_blobs, flatten_payload, BlobReport};

use crate::model::{LogRecord, RecordBody};
use crate::storage::{read_chunk_file, ChunkContents, StorageError};

#[derive(Debug, Error)]
pub enum ViewerError {
    #[error("selector: {0}")]
    Selector(String),
    #[error("{path}: {source}")]
    Corrupt { path: PathBuf, source: StorageError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ViewerError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ViewerError + '_ {
        move |source| ViewerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Chunk,
    Device,
    Experiment,
}

/// Which chunks to look at, and where.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selector {
    pub scope: Scope,
    pub experiment_id: Uuid,
    pub device_id: Option<Uuid>,
    pub chunk_id: Option<Uuid>,
    pub roots: Vec<PathBuf>,
}

impl Selector {
    pub fn experiment(experiment_id: Uuid, roots: Vec<PathBuf>) -> Self {
        Selector {
            scope: Scope::Experiment,
            experiment_id,
            device_id: None,
            chunk_id: None,
            roots,
        }
    }

    pub fn device(experiment_id: Uuid, device_id: Uuid, roots: Vec<PathBuf>) -> Self {
        Selector {
            scope: Scope::Device,
            device_id: Some(device_id),
            ..Selector::experiment(experiment_id, roots)
        }
    }

    pub fn chunk(experiment_id: Uuid, chunk_id: Uuid, roots: Vec<PathBuf>) -> Self {
        Selector {
            scope: Scope::Chunk,
            chunk_id: Some(chunk_id),
            ..Selector::experiment(experiment_id, roots)
        }
    }

    /// Narrowest scope implied by the optional ids.
    pub fn from_parts(
        experiment_id: Uuid,
        device_id: Option<Uuid>,
        chunk_id: Option<Uuid>,
        roots: Vec<PathBuf>,
    ) -> Self {
        let scope = match (device_id, chunk_id) {
            (_, Some(_)) => Scope::Chunk,
            (Some(_), None) => Scope::Device,
            (None, None) => Scope::Experiment,
        };
        Selector {
            scope,
            experiment_id,
            device_id,
            chunk_id,
            roots,
        }
    }

    pub fn validate(&self) -> Result<(), ViewerError> {
        match self.scope {
            Scope::Chunk if self.chunk_id.is_none() => {
                Err(ViewerError::Selector("chunk scope needs a chunk id".into()))
            }
            Scope::Device if self.device_id.is_none() => Err(ViewerError::Selector(
                "device scope needs a device id".into(),
            )),
            _ if self.roots.is_empty() => Err(ViewerError::Selector("no source roots".into())),
            _ => Ok(()),
        }
    }
}

/// Every `.zip` below the selector's roots, in sorted path order. Staging
/// and quarantine directories are skipped.
pub fn discover(selector: &Selector) -> Result<Vec<PathBuf>, ViewerError> {
    selector.validate()?;
    let mut out = Vec::new();
    for root in &selector.roots {
        walk(root, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ViewerError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(ViewerError::io(dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(ViewerError::io(dir))?;
        let path = entry.path();
        let name = entry.file_name();
        if path.is_dir() {
            if name != ".open" && name != "quarantine" {
                walk(&path, out)?;
            }
        } else if path.extension().is_some_and(|e| e == "zip") {
            out.push(path);
        }
    }
    Ok(())
}

/// A record together with where it came from.
#[derive(Clone, Copy, Debug)]
pub struct MergedRecord<'a> {
    pub device_id: Uuid,
    pub chunk_id: Uuid,
    pub record: &'a LogRecord,
    chunk: &'a ChunkContents,
}

impl<'a> MergedRecord<'a> {
    /// Verified blob bytes for a blob record.
    pub fn blob(&self) -> Option<Result<&'a [u8], StorageError>> {
        match &self.record.body {
            RecordBody::Blob(b) => Some(self.chunk.blob(b)),
            RecordBody::Structured(_) => None,
        }
    }
}

/// The selected chunks and their records in merge order.
#[derive(Debug, Default)]
pub struct Merged {
    chunks: Vec<ChunkContents>,
    order: Vec<(usize, usize)>,
    /// Corrupt chunks left out because skipping was requested.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Merged {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn records(&self) -> impl Iterator<Item = MergedRecord<'_>> {
        self.order.iter().map(|&(c, r)| {
            let chunk = &self.chunks[c];
            MergedRecord {
                device_id: chunk.manifest.device_id,
                chunk_id: chunk.manifest.chunk_id,
                record: &chunk.records[r],
                chunk,
            }
        })
    }
}

/// Read every selected chunk and order all records by
/// `(ts_ms, device_id, plugin_id, seq)`, then by chunk position. A chunk found
/// under several roots is used once. A corrupt chunk aborts the merge unless
/// `skip_corrupt` is set.
pub fn merge(selector: &Selector, skip_corrupt: bool) -> Result<Merged, ViewerError> {
    let mut merged = Merged::default();
    let mut seen = BTreeSet::new();
    for path in discover(selector)? {
        let contents = match read_chunk_file(&path) {
            Ok(c) => c,
            Err(source) => {
                if skip_corrupt {
                    merged.skipped.push((path, source.to_string()));
                    continue;
                }
                return Err(ViewerError::Corrupt { path, source });
            }
        };
        let m = &contents.manifest;
        let wanted = m.experiment_id == selector.experiment_id
            && selector.device_id.is_none_or(|d| d == m.device_id)
            && selector.chunk_id.is_none_or(|c| c == m.chunk_id);
        if wanted && seen.insert((m.device_id, m.chunk_id)) {
            merged.chunks.push(contents);
        }
    }
    let chunks = &merged.chunks;
    let mut order: Vec<(usize, usize)> = chunks
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| (0..ch.records.len()).map(move |r| (c, r)))
        .collect();
    order.sort_by(|&(ca, ra), &(cb, rb)| {
        let (a, b) = (&chunks[ca], &chunks[cb]);
        let (x, y) = (&a.records[ra], &b.records[rb]);
        (
            x.ts_ms,
            a.manifest.device_id,
            &x.plugin_id,
            x.seq,
            a.manifest.chunk_seq,
            a.manifest.chunk_id,
        )
            .cmp(&(
                y.ts_ms,
                b.manifest.device_id,
                &y.plugin_id,
                y.seq,
                b.manifest.chunk_seq,
                b.manifest.chunk_id,
            ))
    });
    merged.order = order;
    Ok(merged)
}

/// Listing of the first `limit` merged records, one per line after a header.
pub fn preview(merged: &Merged, limit: usize) -> String {
    let mut out = format!(
        "{:<15} {:<36} {:<14} {:>6}  payload\n",
        "ts_ms", "device_id", "plugin", "seq"
    );
    for r in merged.records().take(limit) {
        let summary = match &r.record.body {
            RecordBody::Structured(v) => {
                let s = v.to_string();
                if s.chars().count() > 80 {
                    format!("{}...", s.chars().take(77).collect::<String>())
                } else {
                    s
                }
            }
            RecordBody::Blob(b) => format!("<blob {} {} bytes>", b.blob_name, b.byte_len),
        };
        out.push_str(&format!(
            "{:<15} {:<36} {:<14} {:>6}  {summary}\n",
            r.record.ts_ms, r.device_id, r.record.plugin_id, r.record.seq
        ));
    }
    out
}
