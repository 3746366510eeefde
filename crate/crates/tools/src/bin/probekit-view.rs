use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use probekit_core::fsutil::write_atomic;
use probekit_core::model::RecordBody;
use probekit_core::viewer::{export_csv, extract_blobs, merge, preview, Merged, Selector};
use serde_json::json;
use uuid::Uuid;

/// Preview, merge and convert collected chunks.
#[derive(Parser)]
#[command(name = "probekit-view", version)]
struct Cli {
    /// Print machine-readable JSON summaries.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the first merged records.
    Preview {
        #[command(flatten)]
        scope: ScopeArgs,
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Write all selected records, merged, as JSON lines.
    Merge(ScopeArgs),
    /// Write one CSV file per plugin.
    Csv(ScopeArgs),
    /// Extract binary blobs and reassemble per-device streams.
    Blobs(ScopeArgs),
}

#[derive(Args)]
struct ScopeArgs {
    #[arg(long)]
    experiment: Uuid,
    #[arg(long)]
    device: Option<Uuid>,
    #[arg(long)]
    chunk: Option<Uuid>,
    /// Directories holding chunks (repeatable).
    #[arg(long = "root", required = true)]
    roots: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave out chunks that fail verification instead of aborting.
    #[arg(long)]
    skip_corrupt: bool,
}

impl ScopeArgs {
    fn load(&self) -> anyhow::Result<Merged> {
        let selector =
            Selector::from_parts(self.experiment, self.device, self.chunk, self.roots.clone());
        let merged = merge(&selector, self.skip_corrupt)?;
        for (path, reason) in &merged.skipped {
            eprintln!("skipped corrupt chunk {}: {reason}", path.display());
        }
        Ok(merged)
    }

    fn out(&self) -> anyhow::Result<&PathBuf> {
        self.out
            .as_ref()
            .context("--out is required for this command")
    }
}

fn merged_jsonl(merged: &Merged) -> Vec<u8> {
    let mut out = Vec::new();
    for r in merged.records() {
        let mut line = json!({
            "ts_ms": r.record.ts_ms,
            "device_id": r.device_id,
            "chunk_id": r.chunk_id,
            "plugin_id": r.record.plugin_id,
            "seq": r.record.seq,
        });
        match &r.record.body {
            RecordBody::Structured(v) => line["payload"] = v.clone(),
            RecordBody::Blob(b) => line["blob_ref"] = json!(b),
        }
        serde_json::to_writer(&mut out, &line).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let summary = match &cli.cmd {
        Cmd::Preview { scope, limit } => {
            let merged = scope.load()?;
            let text = preview(&merged, *limit);
            if let Some(out) = &scope.out {
                fs::create_dir_all(out)?;
                write_atomic(&out.join("preview.txt"), text.as_bytes())?;
            }
            if cli.json {
                json!({ "records": merged.len(), "chunks": merged.chunk_count() })
            } else {
                std::io::stdout().write_all(text.as_bytes())?;
                println!(
                    "{} record(s) in {} chunk(s)",
                    merged.len(),
                    merged.chunk_count()
                );
                return Ok(());
            }
        }
        Cmd::Merge(scope) => {
            let merged = scope.load()?;
            let path = scope.out()?.join("merged.jsonl");
            write_atomic(&path, &merged_jsonl(&merged))?;
            json!({ "records": merged.len(), "chunks": merged.chunk_count(), "file": path, "skipped": merged.skipped.len() })
        }
        Cmd::Csv(scope) => {
            let merged = scope.load()?;
            let files = export_csv(&merged, scope.out()?)?;
            json!({ "records": merged.len(), "files": files, "skipped": merged.skipped.len() })
        }
        Cmd::Blobs(scope) => {
            let merged = scope.load()?;
            let report = extract_blobs(&merged, scope.out()?)?;
            for (at, reason) in &report.failed {
                eprintln!("blob {at} failed verification: {reason}");
            }
            json!({ "written": report.written.len(), "failed": report.failed.len() })
        }
    };
    if cli.json {
        println!("{summary}");
    } else {
        for (k, v) in summary.as_object().expect("summary object") {
            match v {
                serde_json::Value::Array(a) => {
                    println!("{k}:");
                    for item in a {
                        println!(
                            "  {}",
                            item.as_str()
                                .map_or_else(|| item.to_string(), str::to_string)
                        );
                    }
                }
                _ => println!(
                    "{k}: {}",
                    v.as_str().map_or_else(|| v.to_string(), str::to_string)
                ),
            }
        }
    }
    Ok(())
}
