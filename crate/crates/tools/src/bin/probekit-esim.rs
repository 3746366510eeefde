use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Parser;
use probekit_core::builder::ExperimentPackage;
use probekit_core::energysim::{
    calibrate, compare, default_params, scenario, scenario_from_manifest, EnergyParams,
    SCENARIO_LABELS,
};
use probekit_core::model::parse_manifest;
use serde_json::json;

/// Simulate the battery drain of experiment scenarios.
#[derive(Parser)]
#[command(name = "probekit-esim", version)]
struct Cli {
    /// Built-in scenarios, comma separated. Ratios are relative to the first.
    #[arg(long, value_delimiter = ',', conflicts_with = "manifest")]
    scenario: Vec<String>,
    /// Simulate an experiment package or manifest.json, against idle and
    /// wakelocked idle.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Simulated duration in milliseconds.
    #[arg(long, default_value_t = 600_000)]
    duration: u64,
    /// JSON file with model parameters. Missing fields are an error.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Force the screen on for every scenario.
    #[arg(long)]
    screen_on: bool,
    /// Print the calibrated parameter search result.
    #[arg(long)]
    calibrate: bool,
    /// Print machine-readable JSON.
    #[arg(long)]
    json: bool,
}

fn load_manifest(path: &Path) -> anyhow::Result<probekit_core::model::ExperimentManifest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"PK") {
        Ok(ExperimentPackage::from_zip(&bytes)?.manifest()?)
    } else {
        Ok(parse_manifest(&bytes)?)
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if cli.calibrate {
        let c = calibrate();
        if cli.json {
            println!(
                "{}",
                json!({
                    "i_sleep_ma": c.i_sleep_ma,
                    "i_cpu_high_ma": c.i_cpu_high_ma,
                    "poll_work_ms": c.poll_work_ms,
                    "a3_ratio": c.a3_ratio,
                    "a4_ratio": c.a4_ratio,
                })
            );
        } else {
            println!(
                "i_sleep_ma {}  i_cpu_high_ma {}  poll_work_ms {}  A3/Idle_wl {:.4}  A4/Idle_wl {:.4}",
                c.i_sleep_ma, c.i_cpu_high_ma, c.poll_work_ms, c.a3_ratio, c.a4_ratio
            );
        }
        return Ok(());
    }
    let params: EnergyParams<f64> = match &cli.params {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => default_params(),
    };
    let mut scenarios = Vec::new();
    if let Some(path) = &cli.manifest {
        scenarios.push(scenario("idle")?);
        scenarios.push(scenario("idle_wl")?);
        scenarios.push(scenario_from_manifest(&load_manifest(path)?));
    } else if cli.scenario.is_empty() {
        bail!(
            "give --scenario ({}) or --manifest",
            SCENARIO_LABELS.join("|")
        );
    } else {
        for label in &cli.scenario {
            scenarios.push(scenario(label.trim())?);
        }
    }
    if cli.screen_on {
        for s in &mut scenarios {
            s.screen_on = true;
        }
    }
    let cmp = compare(&scenarios, cli.duration, &params)?;
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&cmp)?);
    } else {
        print!("{}", cmp.table());
    }
    Ok(())
}
