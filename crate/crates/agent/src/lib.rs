//! Device agent: installs signed experiment packages, runs them, restores
//! them after restarts and uploads their sealed chunks.

mod agent;
mod config;
pub mod control;
mod error;
mod installed;
mod token;
mod upload;

pub use agent::{Agent, AgentClock, AgentOptions, NetworkProbe, Restored, StaticNetwork};
pub use config::AgentConfig;
pub use error::AgentError;
pub use installed::{InfoReport, InstalledExperiment, Origin, PluginSummary};
pub use token::ControlToken;
pub use upload::{backoff_delay_ms, UploadFault, UploadReport, BACKOFF_BASE_MS, BACKOFF_CAP_MS};
