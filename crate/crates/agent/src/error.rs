use std::io;

use probekit_core::builder::VerifyFailure;
use probekit_core::scheduler::SchedulerError;
use probekit_core::storage::StorageError;
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("experiment {0} is not installed")]
    NotFound(Uuid),
    #[error("experiment {id} version {version} is already installed")]
    Duplicate { id: Uuid, version: String },
    #[error("package rejected: {0}")]
    Verify(#[from] VerifyFailure),
    #[error("package rejected: {0}")]
    Invalid(String),
    #[error("experiment {0} is already running")]
    AlreadyRunning(Uuid),
    #[error("experiment {0} is running; stop it first")]
    Busy(Uuid),
    #[error("uploads are disabled for experiment {0}")]
    UploadDisabled(Uuid),
    #[error("upload failed: {0}")]
    Upload(String),
    #[error("simulated crash")]
    Crashed,
    #[error("control: {0}")]
    Control(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
