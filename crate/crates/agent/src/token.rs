use std::path::Path;

use probekit_core::fsutil::write_private_file;

use crate::AgentError;

/// Shared secret required on every control command.
#[derive(Clone, PartialEq, Eq)]
pub struct ControlToken(String);

impl std::fmt::Debug for ControlToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ControlToken(..)")
    }
}

impl ControlToken {
    pub fn generate() -> Self {
        ControlToken(hex::encode(rand::random::<[u8; 32]>()))
    }

    pub fn from_text(text: &str) -> Self {
        ControlToken(text.trim().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)?;
        let token = ControlToken::from_text(&text);
        if token.0.is_empty() {
            return Err(AgentError::Control(format!("{} is empty", path.display())));
        }
        Ok(token)
    }

    /// Load the token at `path`, creating an owner-only file on first use.
    pub fn load_or_create(path: &Path) -> Result<Self, AgentError> {
        match ControlToken::load(path) {
            Ok(t) => Ok(t),
            Err(AgentError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                let token = ControlToken::generate();
                write_private_file(path, token.0.as_bytes())?;
                Ok(token)
            }
            Err(e) => Err(e),
        }
    }

    /// Constant-time comparison against a presented token.
    pub fn matches(&self, presented: &str) -> bool {
        let (a, b) = (self.0.as_bytes(), presented.as_bytes());
        a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
    }
}
