use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use probekit_agent::control::{self, Command, ControlServer, DaemonInfo, DAEMON_FILE};
use probekit_agent::{
    Agent, AgentOptions, ControlToken, InfoReport, InstalledExperiment, UploadFault, UploadReport,
};
use probekit_core::builder::PublicKey;
use probekit_core::scheduler::RunState;
use serde_json::Value;
use uuid::Uuid;

/// Device agent for probekit experiments.
#[derive(Parser)]
#[command(name = "probekit-agent", version)]
struct Cli {
    /// State directory. Defaults to $PROBEKIT_HOME, then ~/.probekit.
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the agent: restore running experiments, serve control commands
    /// and upload periodically.
    Daemon,
    /// Trust packages signed by this public key.
    Trust { pubkey: PathBuf },
    /// Verify and install a package file.
    Import { pkg: PathBuf },
    /// Download a package from a collection service and install it.
    Fetch {
        #[arg(long)]
        server: String,
        #[arg(long)]
        id: Uuid,
    },
    /// List installed experiments.
    List,
    /// Show what an experiment logs and who signed it.
    Info { id: Uuid },
    /// Start logging. Needs a running daemon.
    Start { id: Uuid },
    /// Stop logging and seal the open chunk. Needs a running daemon.
    Stop { id: Uuid },
    /// Show run counters.
    Status { id: Uuid },
    /// Copy sealed chunks to a directory.
    Dump { id: Uuid, dir: PathBuf },
    /// Upload sealed chunks now.
    Upload { id: Uuid },
    /// Stop the daemon. Running experiments resume on its next start.
    Shutdown,
}

fn home(cli: &Cli) -> anyhow::Result<PathBuf> {
    if let Some(h) = &cli.home {
        return Ok(h.clone());
    }
    if let Some(h) = std::env::var_os("PROBEKIT_HOME") {
        return Ok(PathBuf::from(h));
    }
    let base = std::env::var_os("HOME").context("set PROBEKIT_HOME or --home")?;
    Ok(PathBuf::from(base).join(".probekit"))
}

fn token_path(home: &std::path::Path) -> PathBuf {
    std::env::var_os("PROBEKIT_TOKEN_FILE")
        .map(PathBuf::from)
        .unwrap_or_else(|| home.join("control.token"))
}

fn upload_fault() -> Option<UploadFault> {
    match std::env::var("PROBEKIT_UPLOAD_FAULT").ok()?.as_str() {
        "abort_after_send" => Some(UploadFault::AbortAfterSend),
        _ => None,
    }
}

fn open_agent(home: &std::path::Path) -> anyhow::Result<Agent> {
    let agent = Agent::open(home, AgentOptions::default())?;
    agent.set_upload_fault(upload_fault());
    Ok(agent)
}

fn daemon(home: PathBuf) -> anyhow::Result<()> {
    let agent = Arc::new(open_agent(&home)?);
    for r in agent.restore_running() {
        match r.outcome {
            Ok(_) => tracing::info!(experiment = %r.experiment_id, "restored"),
            Err(e) => tracing::warn!(experiment = %r.experiment_id, error = %e, "not restored"),
        }
    }
    let token = ControlToken::load_or_create(&token_path(&home))?;
    let server = ControlServer::bind(&agent.config().control_addr, token)?;
    server.publish(&home)?;
    tracing::info!(addr = %server.local_addr(), "control channel listening");

    let stopping = server.stopping();
    let uploader = {
        let (agent, stopping) = (agent.clone(), stopping.clone());
        let tick = Duration::from_millis(agent.config().upload_tick_ms.max(10));
        std::thread::spawn(move || {
            while !stopping.load(Ordering::SeqCst) {
                for (id, result) in agent.upload_tick() {
                    match result {
                        Ok(r) => {
                            tracing::info!(experiment = %id, stored = r.stored, gated = r.gated, "upload pass")
                        }
                        Err(e) => {
                            tracing::warn!(experiment = %id, error = %e, "upload pass failed")
                        }
                    }
                }
                std::thread::sleep(tick);
            }
        })
    };
    server.serve(agent.clone());
    let _ = uploader.join();
    agent.suspend();
    let _ = std::fs::remove_file(home.join(DAEMON_FILE));
    Ok(())
}

/// Send to a live daemon when there is one, else run in-process.
fn dispatch(home: &std::path::Path, command: Command) -> anyhow::Result<Value> {
    if let Some(info) = DaemonInfo::load(home) {
        let token = ControlToken::load(&token_path(home)).context("reading the control token")?;
        match control::send(info.addr, &token, command.clone()) {
            Err(probekit_agent::AgentError::Control(m)) if m.contains("unreachable") => {}
            other => return Ok(other?),
        }
    }
    match command {
        Command::Start { .. } | Command::Stop { .. } | Command::Shutdown => {
            bail!("the agent daemon is not running (start it with `probekit-agent daemon`)")
        }
        c => Ok(control::execute(&open_agent(home)?, &c)?),
    }
}

fn render(command: &Command, value: &Value) -> anyhow::Result<String> {
    Ok(match command {
        Command::List => {
            let list: Vec<InstalledExperiment> = serde_json::from_value(value.clone())?;
            let mut out = format!(
                "{:<36}  {:<20} {:<10} {:<8} {}\n",
                "EXPERIMENT", "NAME", "VERSION", "RUNNING", "VERIFIED"
            );
            for e in list {
                let m = &e.manifest;
                out.push_str(&format!(
                    "{:<36}  {:<20} {:<10} {:<8} {}\n",
                    m.experiment_id, m.name, m.version, e.running, e.verified
                ));
            }
            out.trim_end().to_string()
        }
        Command::Info { .. } => serde_json::from_value::<InfoReport>(value.clone())?.to_string(),
        Command::Import { .. } | Command::Fetch { .. } => {
            let e: InstalledExperiment = serde_json::from_value(value.clone())?;
            format!(
                "installed {} {} ({}) signed by {}",
                e.manifest.name,
                e.manifest.version,
                e.manifest.experiment_id,
                e.manifest.author_key_fingerprint
            )
        }
        Command::Start { .. } | Command::Stop { .. } | Command::Status { .. } => {
            let s: RunState = serde_json::from_value(value.clone())?;
            let mut out = format!(
                "{} {}  records {}  polls {}",
                s.experiment_id,
                if s.running { "running" } else { "stopped" },
                s.records_emitted(),
                s.polls_executed()
            );
            if s.holds_wakelock {
                out.push_str("  (wakelock)");
            }
            for (id, c) in &s.plugins {
                out.push_str(&format!(
                    "\n  {id:<16} records {:<8} polls {:<8} missed {}",
                    c.records_emitted, c.polls_executed, c.missed_deadlines
                ));
            }
            if let Some(e) = &s.error {
                out.push_str(&format!("\n  error: {e}"));
            }
            out
        }
        Command::Upload { .. } => {
            let r: UploadReport = serde_json::from_value(value.clone())?;
            if r.gated {
                "skipped: network is metered".to_string()
            } else {
                format!(
                    "attempts {}  stored {}  duplicates {}  deleted {}  quarantined {}",
                    r.attempts,
                    r.stored,
                    r.duplicates,
                    r.deleted,
                    r.quarantined.len()
                )
            }
        }
        Command::Dump { .. } => {
            let copied = value["copied"].as_array().map_or(0, Vec::len);
            let failed = value["failed"].as_array().map_or(0, Vec::len);
            format!("copied {copied} chunk(s), {failed} failed")
        }
        Command::Ping | Command::Shutdown => "ok".to_string(),
    })
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let home = home(&cli)?;
    let command = match cli.cmd {
        Cmd::Daemon => return daemon(home),
        Cmd::Trust { pubkey } => {
            let key = PublicKey::load(&pubkey)?;
            let fp = open_agent(&home)?.trust(&key)?;
            if cli.json {
                println!("{}", serde_json::json!({ "fingerprint": fp }));
            } else {
                println!("trusted {fp}");
            }
            return Ok(());
        }
        Cmd::Import { pkg } => Command::Import {
            path: std::path::absolute(&pkg)?,
        },
        Cmd::Fetch { server, id } => Command::Fetch { server, id },
        Cmd::List => Command::List,
        Cmd::Info { id } => Command::Info { id },
        Cmd::Start { id } => Command::Start { id },
        Cmd::Stop { id } => Command::Stop { id },
        Cmd::Status { id } => Command::Status { id },
        Cmd::Dump { id, dir } => Command::Dump {
            id,
            dest: std::path::absolute(&dir)?,
        },
        Cmd::Upload { id } => Command::Upload { id },
        Cmd::Shutdown => Command::Shutdown,
    };
    let value = dispatch(&home, command.clone())?;
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{}", render(&command, &value)?);
    }
    Ok(())
}
