use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use probekit_service::{serve, ServiceConfig};
use tokio::net::TcpListener;

/// Experiment distribution and chunk ingestion server.
#[derive(Parser)]
#[command(name = "probekit-server", version)]
struct Args {
    /// Store root directory.
    #[arg(long)]
    root: PathBuf,
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// File holding the bearer token for publish and upload.
    #[arg(long)]
    token_file: PathBuf,
    /// Refuse uploads once stored chunks reach this many bytes.
    #[arg(long)]
    quota_bytes: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let token = std::fs::read_to_string(&args.token_file)
        .with_context(|| format!("reading {}", args.token_file.display()))?
        .trim()
        .to_string();
    anyhow::ensure!(!token.is_empty(), "token file is empty");
    let listener = TcpListener::bind(&args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    tracing::info!(addr = %listener.local_addr()?, root = %args.root.display(), "listening");
    let config = ServiceConfig {
        root: args.root,
        token,
        quota_bytes: args.quota_bytes,
    };
    serve(listener, config, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
