use std::collections::BTreeSet;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use super::keys::{PublicKey, SigningKey, ALGORITHM};
use crate::canonical::canonical_json;
use crate::model::{parse_manifest, ExperimentManifest, ModelError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "plugins.lock";
pub const SIGNATURE_FILE: &str = "signature.sig";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEntry {
    pub plugin_id: String,
    pub descriptor_digest: String,
}

/// The plugins a package selects, pinned by descriptor digest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginsLock {
    pub plugins: Vec<LockEntry>,
}

impl PluginsLock {
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json(&serde_json::to_value(self).expect("lock serializes"))
    }
}

/// Contents of `signature.sig`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureFile {
    pub algorithm: String,
    pub key_fingerprint: String,
    /// Hex-encoded signature bytes.
    pub signature: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum VerifyFailure {
    #[error("unsigned")]
    Unsigned,
    #[error("key mismatch: package signed by {found}, expected {expected}")]
    KeyMismatch { expected: String, found: String },
    #[error("unsupported signature algorithm `{0}`")]
    UnsupportedAlgorithm(String),
    #[error("bad signature")]
    BadSignature,
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error("plugins.lock does not match the manifest: {0}")]
    LockMismatch(String),
}

impl VerifyFailure {
    /// Short machine-friendly reason.
    pub fn reason(&self) -> &'static str {
        match self {
            VerifyFailure::Unsigned => "unsigned",
            VerifyFailure::KeyMismatch { .. } => "key mismatch",
            VerifyFailure::UnsupportedAlgorithm(_) => "unsupported algorithm",
            VerifyFailure::BadSignature => "bad signature",
            VerifyFailure::Malformed(_) => "malformed",
            VerifyFailure::LockMismatch(_) => "lock mismatch",
        }
    }
}

/// The raw entries of an experiment package.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentPackage {
    pub manifest_bytes: Vec<u8>,
    pub lock_bytes: Vec<u8>,
    pub signature_bytes: Option<Vec<u8>>,
}

fn entry_options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644)
}

impl ExperimentPackage {
    pub fn new(manifest: &ExperimentManifest, lock: &PluginsLock) -> Self {
        ExperimentPackage {
            manifest_bytes: crate::model::canonicalize_manifest(manifest),
            lock_bytes: lock.to_bytes(),
            signature_bytes: None,
        }
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self, VerifyFailure> {
        let malformed = |e: &dyn std::fmt::Display| VerifyFailure::Malformed(e.to_string());
        let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(|e| malformed(&e))?;
        let mut entry = |name: &str| -> Result<Option<Vec<u8>>, VerifyFailure> {
            let mut f = match archive.by_name(name) {
                Ok(f) => f,
                Err(zip::result::ZipError::FileNotFound) => return Ok(None),
                Err(e) => return Err(malformed(&e)),
            };
            let mut out = Vec::new();
            f.read_to_end(&mut out).map_err(|e| malformed(&e))?;
            Ok(Some(out))
        };
        let manifest_bytes =
            entry(MANIFEST_FILE)?.ok_or_else(|| malformed(&"manifest.json missing"))?;
        let lock_bytes = entry(LOCK_FILE)?.ok_or_else(|| malformed(&"plugins.lock missing"))?;
        let signature_bytes = entry(SIGNATURE_FILE)?;
        Ok(ExperimentPackage {
            manifest_bytes,
            lock_bytes,
            signature_bytes,
        })
    }

    pub fn read(path: &Path) -> Result<Self, VerifyFailure> {
        let bytes = std::fs::read(path)
            .map_err(|e| VerifyFailure::Malformed(format!("{}: {e}", path.display())))?;
        ExperimentPackage::from_zip(&bytes)
    }

    pub fn to_zip(&self) -> Vec<u8> {
        let mut w = ZipWriter::new(Cursor::new(Vec::new()));
        let mut put = |name: &str, data: &[u8]| {
            w.start_file(name, entry_options()).expect("zip entry");
            w.write_all(data).expect("in-memory write");
        };
        put(MANIFEST_FILE, &self.manifest_bytes);
        put(LOCK_FILE, &self.lock_bytes);
        if let Some(sig) = &self.signature_bytes {
            put(SIGNATURE_FILE, sig);
        }
        w.finish().expect("in-memory zip").into_inner()
    }

    pub fn manifest(&self) -> Result<ExperimentManifest, ModelError> {
        parse_manifest(&self.manifest_bytes)
    }

    pub fn lock(&self) -> Result<PluginsLock, VerifyFailure> {
        serde_json::from_slice(&self.lock_bytes)
            .map_err(|e| VerifyFailure::Malformed(format!("plugins.lock: {e}")))
    }

    pub fn signature(&self) -> Result<Option<SignatureFile>, VerifyFailure> {
        self.signature_bytes
            .as_deref()
            .map(|b| {
                serde_json::from_slice(b)
                    .map_err(|e| VerifyFailure::Malformed(format!("signature.sig: {e}")))
            })
            .transpose()
    }

    /// Bytes covered by the signature: the manifest as stored followed by
    /// the SHA-256 of `plugins.lock`.
    pub fn signing_message(&self) -> Vec<u8> {
        let mut msg = self.manifest_bytes.clone();
        msg.extend_from_slice(&Sha256::digest(&self.lock_bytes));
        msg
    }

    pub fn sign(&mut self, key: &SigningKey) {
        let sig = SignatureFile {
            algorithm: ALGORITHM.into(),
            key_fingerprint: key.fingerprint(),
            signature: hex::encode(key.sign(&self.signing_message())),
        };
        self.signature_bytes = Some(serde_json::to_vec_pretty(&sig).expect("signature serializes"));
    }

    /// Check the signature under `key`, then that the manifest parses and
    /// agrees with the lock file. Returns the verified manifest.
    pub fn verify(&self, key: &PublicKey) -> Result<ExperimentManifest, VerifyFailure> {
        let sig = self.signature()?.ok_or(VerifyFailure::Unsigned)?;
        if sig.algorithm != ALGORITHM {
            return Err(VerifyFailure::UnsupportedAlgorithm(sig.algorithm));
        }
        let expected = key.fingerprint();
        if sig.key_fingerprint != expected {
            return Err(VerifyFailure::KeyMismatch {
                expected,
                found: sig.key_fingerprint,
            });
        }
        let raw = hex::decode(&sig.signature).map_err(|_| VerifyFailure::BadSignature)?;
        if !key.verify(&self.signing_message(), &raw) {
            return Err(VerifyFailure::BadSignature);
        }
        let manifest = self
            .manifest()
            .map_err(|e| VerifyFailure::Malformed(e.to_string()))?;
        if manifest.author_key_fingerprint != expected {
            return Err(VerifyFailure::KeyMismatch {
                expected,
                found: manifest.author_key_fingerprint,
            });
        }
        check_lock(&manifest, &self.lock()?)?;
        Ok(manifest)
    }

    /// Verify against whichever trusted key matches the signer's fingerprint.
    pub fn verify_trusted(
        &self,
        trusted: &[PublicKey],
    ) -> Result<ExperimentManifest, VerifyFailure> {
        let sig = self.signature()?.ok_or(VerifyFailure::Unsigned)?;
        match trusted
            .iter()
            .find(|k| k.fingerprint() == sig.key_fingerprint)
        {
            Some(k) => self.verify(k),
            None => Err(VerifyFailure::KeyMismatch {
                expected: trusted
                    .iter()
                    .map(|k| k.fingerprint())
                    .collect::<Vec<_>>()
                    .join(","),
                found: sig.key_fingerprint,
            }),
        }
    }
}

fn check_lock(m: &ExperimentManifest, lock: &PluginsLock) -> Result<(), VerifyFailure> {
    let in_manifest: BTreeSet<&str> = m
        .plugin_configs
        .iter()
        .map(|p| p.plugin_id.as_str())
        .collect();
    let in_lock: BTreeSet<&str> = lock.plugins.iter().map(|p| p.plugin_id.as_str()).collect();
    if in_lock.len() != lock.plugins.len() {
        return Err(VerifyFailure::LockMismatch("duplicate entries".into()));
    }
    if in_manifest != in_lock {
        let diff: Vec<&str> = in_manifest
            .symmetric_difference(&in_lock)
            .copied()
            .collect();
        return Err(VerifyFailure::LockMismatch(diff.join(", ")));
    }
    Ok(())
}
