//! Local control channel: one JSON request line per TCP connection, answered
//! with one JSON response line. Every request carries the control token.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use probekit_core::fsutil::write_private_file;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use crate::agent::Agent;
use crate::token::ControlToken;
use crate::AgentError;

pub const DAEMON_FILE: &str = "daemon.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Ping,
    Import { path: PathBuf },
    Fetch { server: String, id: Uuid },
    List,
    Info { id: Uuid },
    Start { id: Uuid },
    Stop { id: Uuid },
    Status { id: Uuid },
    Dump { id: Uuid, dest: PathBuf },
    Upload { id: Uuid },
    Shutdown,
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    token: String,
    #[serde(flatten)]
    command: Command,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Where a running daemon listens, written to `<home>/daemon.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DaemonInfo {
    pub addr: SocketAddr,
    pub pid: u32,
}

impl DaemonInfo {
    pub fn load(home: &Path) -> Option<DaemonInfo> {
        let bytes = std::fs::read(home.join(DAEMON_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}

/// Run one command against an in-process agent.
pub fn execute(agent: &Agent, command: &Command) -> Result<Value, AgentError> {
    Ok(match command {
        Command::Ping => json!({ "device_id": agent.device_id() }),
        Command::Import { path } => to_value(&agent.import(path)?),
        Command::Fetch { server, id } => to_value(&agent.fetch(server, *id)?),
        Command::List => to_value(&agent.list()),
        Command::Info { id } => to_value(&agent.info(*id)?),
        Command::Start { id } => to_value(&agent.start(*id)?),
        Command::Stop { id } => to_value(&agent.stop(*id)?),
        Command::Status { id } => to_value(&agent.status(*id)?),
        Command::Dump { id, dest } => {
            let r = agent.dump(*id, dest)?;
            json!({
                "copied": r.copied,
                "failed": r.failed.iter().map(|(id, e)| json!({"chunk_id": id, "error": e})).collect::<Vec<_>>(),
            })
        }
        Command::Upload { id } => to_value(&agent.upload_now(*id)?),
        Command::Shutdown => Value::Null,
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable result")
}

/// Control server bound to a local port.
pub struct ControlServer {
    listener: TcpListener,
    token: ControlToken,
    stopping: Arc<AtomicBool>,
}

impl ControlServer {
    pub fn bind(addr: &str, token: ControlToken) -> Result<Self, AgentError> {
        let listener = TcpListener::bind(addr)?;
        Ok(ControlServer {
            listener,
            token,
            stopping: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Record the address and pid so clients can find the daemon.
    pub fn publish(&self, home: &Path) -> Result<(), AgentError> {
        let info = DaemonInfo {
            addr: self.local_addr(),
            pid: std::process::id(),
        };
        write_private_file(
            &home.join(DAEMON_FILE),
            &serde_json::to_vec(&info).expect("daemon info serializes"),
        )?;
        Ok(())
    }

    pub fn stopping(&self) -> Arc<AtomicBool> {
        self.stopping.clone()
    }

    /// Serve connections until a `shutdown` command arrives. Each
    /// connection is handled on its own thread.
    pub fn serve(&self, agent: Arc<Agent>) {
        for stream in self.listener.incoming() {
            if self.stopping.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let (agent, token, stopping) =
                (agent.clone(), self.token.clone(), self.stopping.clone());
            let addr = self.local_addr();
            std::thread::spawn(move || {
                if handle(stream, &agent, &token) == Some(Command::Shutdown) {
                    stopping.store(true, Ordering::SeqCst);
                    // Unblock the accept loop.
                    let _ = TcpStream::connect(addr);
                }
            });
        }
    }
}

fn handle(stream: TcpStream, agent: &Agent, token: &ControlToken) -> Option<Command> {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut reader = BufReader::new(&stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let (response, command) = match serde_json::from_str::<Request>(&line) {
        Err(e) => (failure(format!("bad request: {e}")), None),
        Ok(req) if !token.matches(&req.token) => {
            tracing::warn!("rejected control command with a bad token");
            (failure("unauthorized: bad control token".into()), None)
        }
        Ok(req) => {
            let r = match execute(agent, &req.command) {
                Ok(v) => Response {
                    ok: true,
                    result: v,
                    error: None,
                },
                Err(e) => failure(e.to_string()),
            };
            (r, Some(req.command))
        }
    };
    let mut out = serde_json::to_vec(&response).expect("response serializes");
    out.push(b'\n');
    let _ = (&stream).write_all(&out);
    command
}

fn failure(message: String) -> Response {
    Response {
        ok: false,
        result: Value::Null,
        error: Some(message),
    }
}

/// Send one command to the daemon at `addr`.
pub fn send(addr: SocketAddr, token: &ControlToken, command: Command) -> Result<Value, AgentError> {
    let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
        .map_err(|e| AgentError::Control(format!("daemon at {addr} unreachable: {e}")))?;
    let req = Request {
        token: token.as_str().to_string(),
        command,
    };
    let mut line = serde_json::to_vec(&req).expect("request serializes");
    line.push(b'\n');
    (&stream).write_all(&line)?;
    let mut reply = String::new();
    BufReader::new(&stream).read_line(&mut reply)?;
    let resp: Response = serde_json::from_str(&reply)
        .map_err(|e| AgentError::Control(format!("bad response: {e}")))?;
    if resp.ok {
        Ok(resp.result)
    } else {
        Err(AgentError::Control(resp.error.unwrap_or_default()))
    }
}
