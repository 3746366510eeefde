use crate::model::{ExperimentManifest, PluginKind};

use super::{c, EnergyError, Load, Scalar, Scenario};

pub const SCENARIO_LABELS: [&str; 11] = [
    "idle", "idle_wl", "a1", "a2", "a3", "a4", "b0", "b1", "b2", "b3", "b4",
];

// Touchscreen and keystroke logging while the user interacts.
const INPUT_EVENT_HZ: f64 = 50.0;
const INPUT_EVENT_WORK_MS: f64 = 2.5;
// Microphone capture: codec draw plus encoding work.
const AUDIO_BUSY_FRACTION: f64 = 0.1;
const AUDIO_EXTRA_MA: f64 = 12.0;
// Network counters read from several files per poll.
const NETWORK_WORK_SCALE: f64 = 2.0;

fn sensor<T: Scalar>(interval_ms: u64) -> Load<T> {
    Load::Polling {
        interval_ms,
        work_scale: T::one(),
    }
}

fn input<T: Scalar>() -> Load<T> {
    Load::Events {
        rate_hz: c(INPUT_EVENT_HZ),
        work_ms: c(INPUT_EVENT_WORK_MS),
    }
}

fn audio<T: Scalar>() -> Load<T> {
    Load::Continuous {
        busy_fraction: c(AUDIO_BUSY_FRACTION),
        extra_ma: c(AUDIO_EXTRA_MA),
    }
}

/// Built-in scenario by label. A-series run with the screen off and B-series
/// with the screen on.
pub fn scenario<T: Scalar>(label: &str) -> Result<Scenario<T>, EnergyError> {
    let s = match label {
        "idle" => Scenario::new(label, vec![]),
        "idle_wl" => Scenario {
            wakelock: true,
            ..Scenario::new(label, vec![])
        },
        "a1" => Scenario::new(label, vec![sensor(50)]),
        "a2" => Scenario::new(label, vec![sensor(100), sensor(100)]),
        "a3" => Scenario::new(label, vec![sensor(200)]),
        "a4" => Scenario::new(
            label,
            vec![Load::Polling {
                interval_ms: 50,
                work_scale: c(NETWORK_WORK_SCALE),
            }],
        ),
        "b0" => Scenario::new(label, vec![]).with_screen(true),
        "b1" => Scenario::new(label, vec![input()]).with_screen(true),
        "b2" => Scenario::new(label, vec![input(), sensor(50), sensor(50)]).with_screen(true),
        "b3" => Scenario::new(label, vec![input(), audio()]).with_screen(true),
        "b4" => {
            Scenario::new(label, vec![input(), sensor(50), sensor(50), audio()]).with_screen(true)
        }
        other => return Err(EnergyError::UnknownScenario(other.to_string())),
    };
    Ok(s)
}

/// Typical event rates per built-in event plugin.
fn event_rate_hz(plugin_id: &str) -> f64 {
    match plugin_id {
        "fs_events" => 0.05,
        "clock_events" => 0.001,
        "activity_state" => 0.01,
        _ => 0.1,
    }
}

fn work_scale(plugin_id: &str) -> f64 {
    match plugin_id {
        "net_traffic" => NETWORK_WORK_SCALE,
        "proc_list" => 4.0,
        _ => 1.0,
    }
}

/// Scenario equivalent of an experiment's plugin set.
pub fn scenario_from_manifest<T: Scalar>(manifest: &ExperimentManifest) -> Scenario<T> {
    let loads = manifest
        .plugin_configs
        .iter()
        .map(|p| match (p.kind, p.interval_ms) {
            (PluginKind::Polling, Some(interval_ms)) => Load::Polling {
                interval_ms,
                work_scale: c(work_scale(&p.plugin_id)),
            },
            _ => Load::Events {
                rate_hz: c(event_rate_hz(&p.plugin_id)),
                work_ms: c(2.0),
            },
        })
        .collect();
    Scenario::new(&manifest.name, loads)
}
