use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ed25519_dalek::{Signer, Verifier};
use sha2::{Digest, Sha256};

use crate::fsutil::{create_private_dir, write_private_file};

pub const SECRET_KEY_FILE: &str = "signing.key";
pub const PUBLIC_KEY_FILE: &str = "signing.pub";
pub const ALGORITHM: &str = "ed25519";

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: not a hex-encoded ed25519 key")]
    Format(String),
}

fn fingerprint_of(public: &[u8; 32]) -> String {
    hex::encode(Sha256::digest(public))
}

fn read_hex32(path: &Path) -> Result<[u8; 32], KeyError> {
    let text = fs::read_to_string(path).map_err(|source| KeyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_hex32(text.trim()).ok_or_else(|| KeyError::Format(path.display().to_string()))
}

fn parse_hex32(text: &str) -> Option<[u8; 32]> {
    hex::decode(text).ok()?.try_into().ok()
}

/// An author's Ed25519 key pair.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn generate() -> Self {
        SigningKey::from_seed(rand::random())
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.0.verifying_key())
    }

    pub fn fingerprint(&self) -> String {
        self.public_key().fingerprint()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.0.sign(message).to_bytes()
    }

    /// Write `signing.key` (owner-only) and `signing.pub` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), KeyError> {
        let io = |path: PathBuf| move |source| KeyError::Io { path, source };
        create_private_dir(dir).map_err(io(dir.to_path_buf()))?;
        let secret = dir.join(SECRET_KEY_FILE);
        write_private_file(
            &secret,
            format!("{}\n", hex::encode(self.0.to_bytes())).as_bytes(),
        )
        .map_err(io(secret.clone()))?;
        let public = dir.join(PUBLIC_KEY_FILE);
        fs::write(&public, format!("{}\n", self.public_key().to_hex())).map_err(io(public.clone()))
    }

    /// Load from a key directory or directly from a `signing.key` file.
    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let file = if path.is_dir() {
            path.join(SECRET_KEY_FILE)
        } else {
            path.to_path_buf()
        };
        Ok(SigningKey::from_seed(read_hex32(&file)?))
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("SigningKey")
            .field(&self.fingerprint())
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PublicKey(ed25519_dalek::VerifyingKey);

impl PublicKey {
    pub fn from_hex(text: &str) -> Option<Self> {
        ed25519_dalek::VerifyingKey::from_bytes(&parse_hex32(text.trim())?)
            .ok()
            .map(PublicKey)
    }

    /// Load from a `signing.pub` file or a key directory.
    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let file = if path.is_dir() {
            path.join(PUBLIC_KEY_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = read_hex32(&file)?;
        ed25519_dalek::VerifyingKey::from_bytes(&bytes)
            .map(PublicKey)
            .map_err(|_| KeyError::Format(file.display().to_string()))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0.as_bytes())
    }

    /// Lowercase hex SHA-256 of the raw public key.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self.0.as_bytes())
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
            return false;
        };
        self.0.verify(message, &sig).is_ok()
    }
}
