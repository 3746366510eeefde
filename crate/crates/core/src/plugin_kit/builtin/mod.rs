//! Built-in collectors, spanning sensor data (synthetic sensor), device/OS
//! context (cpu, memory, network, processes, filesystem, clock) and a user
//! interaction analog (activity state).

mod activity;
mod clock_events;
mod fs_events;
mod host;
mod synth;

use std::collections::BTreeSet;

pub use synth::{synth_noise, synth_value, SYNTH_NOISE_FRACTION};

use super::descriptor::{OptionSpec, PluginDescriptor};
use super::instance::Behavior;
use super::Factory;
use crate::model::{Capability, PluginKind};

const AUTHOR: &str = "probekit";

fn descriptor(
    plugin_id: &str,
    kind: PluginKind,
    description: &str,
    caps: &[Capability],
    option_schema: Vec<OptionSpec>,
    default_interval_ms: Option<u64>,
) -> PluginDescriptor {
    PluginDescriptor {
        plugin_id: plugin_id.into(),
        kind,
        author: AUTHOR.into(),
        description: description.into(),
        required_capabilities: caps.iter().copied().collect::<BTreeSet<_>>(),
        option_schema,
        default_interval_ms,
    }
}

pub(super) fn all() -> Vec<(PluginDescriptor, Factory)> {
    use PluginKind::{Event, Polling};
    vec![
        (
            descriptor(
                "synth_sensor",
                Polling,
                "Deterministic synthetic sensor: amplitude * sin(2*pi*f*t) plus seeded noise",
                &[Capability::SensorSynth],
                vec![
                    OptionSpec::integer("seed", 1, None, None),
                    OptionSpec::decimal("amplitude", 1.0, Some(0.0), None),
                    OptionSpec::decimal("frequency_hz", 1.0, Some(0.0), Some(500.0)),
                    OptionSpec::integer("precision", 2, Some(0), Some(12)),
                ],
                Some(50),
            ),
            |o| {
                Ok(Behavior::Polling(Box::new(
                    synth::SynthSensor::from_options(o),
                )))
            },
        ),
        (
            descriptor(
                "sys_cpu",
                Polling,
                "Aggregate CPU time counters and busy fraction since the previous poll",
                &[Capability::SysCpu],
                vec![OptionSpec::boolean("per_core", false)],
                Some(1_000),
            ),
            |o| Ok(Behavior::Polling(Box::new(host::CpuStats::from_options(o)))),
        ),
        (
            descriptor(
                "sys_mem",
                Polling,
                "Physical and swap memory usage in bytes",
                &[Capability::SysMem],
                vec![],
                Some(1_000),
            ),
            |_| Ok(Behavior::Polling(Box::new(host::MemStats))),
        ),
        (
            descriptor(
                "net_traffic",
                Polling,
                "Per-interface byte and packet counters",
                &[Capability::NetTraffic],
                vec![
                    OptionSpec::boolean("include_loopback", false),
                    OptionSpec::text("interface", ""),
                ],
                Some(1_000),
            ),
            |o| Ok(Behavior::Polling(Box::new(host::NetStats::from_options(o)))),
        ),
        (
            descriptor(
                "proc_list",
                Polling,
                "Running processes (pid, name, state, resident pages)",
                &[Capability::ProcList],
                vec![OptionSpec::integer(
                    "max_entries",
                    50,
                    Some(1),
                    Some(100_000),
                )],
                Some(60_000),
            ),
            |o| Ok(Behavior::Polling(Box::new(host::ProcList::from_options(o)))),
        ),
        (
            descriptor(
                "fs_events",
                Event,
                "Create/modify/remove notifications under a watched directory",
                &[Capability::FsEvents],
                vec![
                    OptionSpec::text("path", "."),
                    OptionSpec::boolean("recursive", false),
                ],
                None,
            ),
            |o| Ok(Behavior::Event(fs_events::FsEvents::from_options(o))),
        ),
        (
            descriptor(
                "clock_events",
                Event,
                "Timezone changes and wall-clock jumps",
                &[Capability::ClockEvents],
                vec![
                    OptionSpec::boolean("monitor_host", true),
                    OptionSpec::integer("check_interval_ms", 1_000, Some(10), None),
                    OptionSpec::integer("jump_threshold_ms", 2_000, Some(1), None),
                ],
                None,
            ),
            |o| Ok(Behavior::Event(clock_events::ClockEvents::from_options(o))),
        ),
        (
            descriptor(
                "activity_state",
                Event,
                "Transitions of the host activity signal (active/idle)",
                &[Capability::ActivityState],
                vec![OptionSpec::text("trace_file", "")],
                None,
            ),
            |_| Ok(Behavior::Event(activity::ActivityState::shared())),
        ),
    ]
}
