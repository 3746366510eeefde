//! Filesystem-backed store for published packages and received chunks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use probekit_core::builder::ExperimentPackage;
use probekit_core::fsutil::{sync_dir, write_atomic};
use probekit_core::model::{compare_versions, ExperimentManifest};
use probekit_core::storage::read_chunk_bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("{0} already published")]
    Duplicate(String),
    #[error("not found")]
    NotFound,
    #[error("store full")]
    Full,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn io_err(e: io::Error) -> StoreError {
    if e.kind() == io::ErrorKind::StorageFull {
        StoreError::Full
    } else {
        StoreError::Io(e)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub experiment_id: Uuid,
    pub name: String,
    pub version: String,
    pub author: String,
    pub fingerprint: String,
}

impl ExperimentEntry {
    fn from_manifest(m: &ExperimentManifest) -> Self {
        ExperimentEntry {
            experiment_id: m.experiment_id,
            name: m.name.clone(),
            version: m.version.clone(),
            author: m.author_name.clone(),
            fingerprint: m.author_key_fingerprint.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingest {
    Stored,
    Duplicate,
}

#[derive(Default)]
struct Index {
    chunks: HashSet<Uuid>,
    in_flight: HashSet<Uuid>,
    bytes: u64,
}

pub struct ServerStore {
    root: PathBuf,
    quota_bytes: Option<u64>,
    index: Mutex<Index>,
    settled: Condvar,
    experiments: Mutex<BTreeMap<(Uuid, String), ExperimentEntry>>,
}

impl ServerStore {
    /// Open or create a store. The chunk index is rebuilt from the files on
    /// disk so it cannot disagree with them after a crash.
    pub fn open(root: impl Into<PathBuf>, quota_bytes: Option<u64>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("experiments"))?;
        fs::create_dir_all(root.join("data"))?;
        let mut index = Index::default();
        for path in walk(&root.join("data"))? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".tmp") {
                let _ = fs::remove_file(&path);
                continue;
            }
            if let Some(id) = name
                .strip_suffix(".zip")
                .and_then(|s| Uuid::parse_str(s).ok())
            {
                index.bytes += fs::metadata(&path)?.len();
                index.chunks.insert(id);
            }
        }
        let mut experiments = BTreeMap::new();
        for path in walk(&root.join("experiments"))? {
            if path.extension().is_some_and(|e| e == "pkg") {
                let bytes = fs::read(&path)?;
                match ExperimentPackage::from_zip(&bytes)
                    .ok()
                    .and_then(|p| p.manifest().ok())
                {
                    Some(m) => {
                        experiments.insert(
                            (m.experiment_id, m.version.clone()),
                            ExperimentEntry::from_manifest(&m),
                        );
                    }
                    None => tracing::warn!(path = %path.display(), "skipping unreadable package"),
                }
            }
        }
        let store = ServerStore {
            root,
            quota_bytes,
            index: Mutex::new(index),
            settled: Condvar::new(),
            experiments: Mutex::new(experiments),
        };
        store.persist_index()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn chunk_path(&self, experiment_id: Uuid, device_id: Uuid, chunk_id: Uuid) -> PathBuf {
        self.root
            .join("data")
            .join(experiment_id.to_string())
            .join(device_id.to_string())
            .join(format!("{chunk_id}.zip"))
    }

    pub fn package_path(&self, experiment_id: Uuid, version: &str) -> PathBuf {
        self.root
            .join("experiments")
            .join(experiment_id.to_string())
            .join(format!("{version}.pkg"))
    }

    pub fn chunks_stored(&self) -> usize {
        self.index.lock().unwrap().chunks.len()
    }

    pub fn experiments_published(&self) -> usize {
        self.experiments.lock().unwrap().len()
    }

    pub fn list_experiments(&self) -> Vec<ExperimentEntry> {
        self.experiments.lock().unwrap().values().cloned().collect()
    }

    /// Bytes of the newest published version of an experiment.
    pub fn package(&self, experiment_id: Uuid) -> Result<Vec<u8>, StoreError> {
        let version = self
            .experiments
            .lock()
            .unwrap()
            .keys()
            .filter(|(id, _)| *id == experiment_id)
            .map(|(_, v)| v.clone())
            .max_by(|a, b| compare_versions(a, b))
            .ok_or(StoreError::NotFound)?;
        Ok(fs::read(self.package_path(experiment_id, &version))?)
    }

    pub fn publish(&self, bytes: &[u8]) -> Result<ExperimentEntry, StoreError> {
        let bad = |m: String| StoreError::BadRequest(m);
        let package = ExperimentPackage::from_zip(bytes).map_err(|e| bad(e.to_string()))?;
        let manifest = package.manifest().map_err(|e| bad(e.to_string()))?;
        match package.signature() {
            Ok(Some(_)) => {}
            Ok(None) => return Err(bad("package is unsigned".into())),
            Err(e) => return Err(bad(e.to_string())),
        }
        if !is_safe_component(&manifest.version) {
            return Err(bad(format!("unusable version `{}`", manifest.version)));
        }
        let key = (manifest.experiment_id, manifest.version.clone());
        let mut experiments = self.experiments.lock().unwrap();
        if experiments.contains_key(&key) {
            return Err(StoreError::Duplicate(format!(
                "{} version {}",
                manifest.experiment_id, manifest.version
            )));
        }
        write_atomic(
            &self.package_path(manifest.experiment_id, &manifest.version),
            bytes,
        )
        .map_err(io_err)?;
        let entry = ExperimentEntry::from_manifest(&manifest);
        experiments.insert(key, entry.clone());
        Ok(entry)
    }

    /// Verify and durably store one chunk. Returns only after the file and
    /// the index are synced.
    pub fn ingest(
        &self,
        experiment_id: Uuid,
        device_id: Uuid,
        chunk_id: Uuid,
        bytes: &[u8],
    ) -> Result<Ingest, StoreError> {
        let contents = read_chunk_bytes(bytes, &chunk_id.to_string())
            .map_err(|e| StoreError::BadRequest(e.to_string()))?;
        let m = &contents.manifest;
        if (m.experiment_id, m.device_id, m.chunk_id) != (experiment_id, device_id, chunk_id) {
            return Err(StoreError::BadRequest(format!(
                "chunk manifest ids {}/{}/{} do not match the path",
                m.experiment_id, m.device_id, m.chunk_id
            )));
        }

        let mut index = self.index.lock().unwrap();
        while index.in_flight.contains(&chunk_id) {
            index = self.settled.wait(index).unwrap();
        }
        if index.chunks.contains(&chunk_id) {
            return Ok(Ingest::Duplicate);
        }
        if self
            .quota_bytes
            .is_some_and(|q| index.bytes + bytes.len() as u64 > q)
        {
            return Err(StoreError::Full);
        }
        index.in_flight.insert(chunk_id);
        drop(index);

        let path = self.chunk_path(experiment_id, device_id, chunk_id);
        let written = write_atomic(&path, bytes).map_err(io_err);

        let mut index = self.index.lock().unwrap();
        index.in_flight.remove(&chunk_id);
        let result = match written {
            Ok(()) => {
                index.chunks.insert(chunk_id);
                index.bytes += bytes.len() as u64;
                match self.write_index(&index) {
                    Ok(()) => Ok(Ingest::Stored),
                    Err(e) => {
                        index.chunks.remove(&chunk_id);
                        index.bytes -= bytes.len() as u64;
                        let _ = fs::remove_file(&path);
                        Err(io_err(e))
                    }
                }
            }
            Err(e) => Err(e),
        };
        drop(index);
        self.settled.notify_all();
        result
    }

    /// Ids of every stored chunk, sorted.
    pub fn chunk_ids(&self) -> Vec<Uuid> {
        let mut ids: Vec<_> = self.index.lock().unwrap().chunks.iter().copied().collect();
        ids.sort();
        ids
    }

    fn persist_index(&self) -> io::Result<()> {
        let index = self.index.lock().unwrap();
        self.write_index(&index)
    }

    fn write_index(&self, index: &Index) -> io::Result<()> {
        let mut ids: Vec<_> = index.chunks.iter().map(Uuid::to_string).collect();
        ids.sort();
        let body = serde_json::to_vec(&ids).map_err(io::Error::other)?;
        write_atomic(&self.root.join(INDEX_FILE), &body)?;
        sync_dir(&self.root);
        Ok(())
    }
}

fn is_safe_component(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-+".contains(c))
}

fn walk(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    Ok(out)
}
