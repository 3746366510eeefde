use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Parser, Subcommand};
use probekit_core::builder::{build, list_plugins, ExperimentPackage, PublicKey, SigningKey};
use probekit_core::plugin_kit::Registry;
use serde_json::json;

/// Build and verify signed experiment packages.
#[derive(Parser)]
#[command(name = "probekit-build", version)]
struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Show the plugins packages can select.
    ListPlugins,
    /// Create an Ed25519 signing key pair in a directory.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and sign a package from an experiment config.
    Build {
        #[arg(long)]
        config: PathBuf,
        /// Key directory or secret key file.
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a package's signature against a public key.
    Verify {
        #[arg(long)]
        pkg: PathBuf,
        #[arg(long)]
        pubkey: PathBuf,
    },
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::ListPlugins => {
            let registry = Registry::builtin();
            if cli.json {
                println!("{}", serde_json::to_string_pretty(registry.describe_all())?);
            } else {
                print!("{}", list_plugins(&registry));
            }
        }
        Cmd::Keygen { out } => {
            let key = SigningKey::generate();
            key.save(&out)
                .with_context(|| format!("writing keys to {}", out.display()))?;
            if cli.json {
                println!(
                    "{}",
                    json!({ "fingerprint": key.fingerprint(), "dir": out })
                );
            } else {
                println!("wrote key pair to {}", out.display());
                println!("fingerprint {}", key.fingerprint());
            }
        }
        Cmd::Build { config, key, out } => {
            let key = SigningKey::load(&key)?;
            let pkg = build(&config, &key, &out, now_ms())?;
            let m = pkg.manifest()?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                let caps: Vec<_> = m.capabilities.iter().map(|c| c.as_str()).collect();
                println!("built {} {} -> {}", m.name, m.version, out.display());
                println!("experiment_id {}", m.experiment_id);
                println!("signed by     {}", m.author_key_fingerprint);
                println!("capabilities  {}", caps.join(", "));
            }
        }
        Cmd::Verify { pkg, pubkey } => {
            let key = PublicKey::load(&pubkey)?;
            let result = ExperimentPackage::read(&pkg).and_then(|p| p.verify(&key));
            match result {
                Ok(m) => {
                    if cli.json {
                        println!(
                            "{}",
                            json!({ "valid": true, "experiment_id": m.experiment_id, "version": m.version })
                        );
                    } else {
                        println!("OK {} {} ({})", m.name, m.version, m.experiment_id);
                    }
                }
                Err(e) => {
                    if cli.json {
                        println!(
                            "{}",
                            json!({ "valid": false, "reason": e.reason(), "detail": e.to_string() })
                        );
                    } else {
                        eprintln!("verification failed: {e}");
                    }
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
