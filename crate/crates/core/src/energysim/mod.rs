//! Duty-cycle energy simulator for experiment scenarios.
//!
//! The device is either asleep (`i_sleep_ma`) or awake (adds
//! `awake_overhead_ma`). While awake the CPU runs at low frequency except
//! when it is busy with plugin work. A polling plugin whose idle gap between
//! polls is shorter than `governor_scale_down_ms` never lets the governor
//! scale back down, so the CPU stays pinned at high frequency for the whole
//! run; with longer gaps only the work itself runs at high frequency.
//!
//! Everything is closed-form per duty cycle, so results are exact and
//! independent of the simulated duration.

mod scenarios;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scenarios::{scenario, scenario_from_manifest, SCENARIO_LABELS};

use crate::model::COARSE_THRESHOLD_MS;

/// Scalar type the simulator can run on.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant fits the scalar type")
}

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("parameter `{0}` must be positive and finite")]
    InvalidParam(&'static str),
    #[error("duration {duration_ms} ms is shorter than 10 polls of the {interval_ms} ms interval")]
    DurationTooShort { duration_ms: u64, interval_ms: u64 },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

/// Device power-model constants, in milliamps and milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EnergyParams<T> {
    pub i_sleep_ma: T,
    pub awake_overhead_ma: T,
    pub i_cpu_high_ma: T,
    pub governor_scale_down_ms: T,
    pub poll_work_ms: T,
    pub coarse_wakeup_ms: T,
    /// Extra draw of the lit screen.
    pub screen_on_ma: T,
    /// Fraction of time the CPU is busy at high frequency because of the
    /// user, while the screen is on.
    pub in_use_busy_fraction: T,
}

impl<T: Scalar> EnergyParams<T> {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let fields = [
            ("i_sleep_ma", self.i_sleep_ma),
            ("awake_overhead_ma", self.awake_overhead_ma),
            ("i_cpu_high_ma", self.i_cpu_high_ma),
            ("governor_scale_down_ms", self.governor_scale_down_ms),
            ("poll_work_ms", self.poll_work_ms),
            ("coarse_wakeup_ms", self.coarse_wakeup_ms),
            ("screen_on_ma", self.screen_on_ma),
            ("in_use_busy_fraction", self.in_use_busy_fraction),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > T::zero()) {
                return Err(EnergyError::InvalidParam(name));
            }
        }
        if self.in_use_busy_fraction > T::one() {
            return Err(EnergyError::InvalidParam("in_use_busy_fraction"));
        }
        Ok(())
    }

    pub fn awake_ma(&self) -> T {
        self.i_sleep_ma + self.awake_overhead_ma
    }

    pub fn high_freq_ma(&self) -> T {
        self.awake_ma() + self.i_cpu_high_ma
    }

    /// Polling intervals below this never let the CPU scale down.
    pub fn pinning_threshold_ms(&self) -> T {
        self.poll_work_ms + self.governor_scale_down_ms
    }
}

/// Defaults obtained from [`calibrate`] with the awake overhead and
/// scale-down delay fixed at 35 mA and 100 ms.
pub fn default_params<T: Scalar>() -> EnergyParams<T> {
    EnergyParams {
        i_sleep_ma: c(8.0),
        awake_overhead_ma: c(35.0),
        i_cpu_high_ma: c(55.0),
        governor_scale_down_ms: c(100.0),
        poll_work_ms: c(18.75),
        coarse_wakeup_ms: c(1000.0),
        screen_on_ma: c(250.0),
        in_use_busy_fraction: c(0.5),
    }
}

/// One source of CPU work in a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", tag = "type", rename_all = "snake_case")]
pub enum Load<T> {
    /// A polling plugin. Each poll costs `poll_work_ms * work_scale`.
    Polling { interval_ms: u64, work_scale: T },
    /// An event plugin firing `rate_hz` times per second on average.
    Events { rate_hz: T, work_ms: T },
    /// Work that keeps the device awake throughout, such as recording audio.
    Continuous { busy_fraction: T, extra_ma: T },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scenario<T> {
    pub label: String,
    pub loads: Vec<Load<T>>,
    /// Hold the device awake even without precise timers.
    pub wakelock: bool,
    pub screen_on: bool,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(label: &str, loads: Vec<Load<T>>) -> Self {
        Scenario {
            label: label.into(),
            loads,
            wakelock: false,
            screen_on: false,
        }
    }

    pub fn with_screen(mut self, on: bool) -> Self {
        self.screen_on = on;
        self
    }

    fn min_interval(&self) -> Option<u64> {
        self.loads
            .iter()
            .filter_map(|l| match l {
                Load::Polling { interval_ms, .. } => Some(*interval_ms),
                _ => None,
            })
            .min()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EnergyReport<T> {
    pub scenario: String,
    pub duration_ms: u64,
    pub avg_current_ma: T,
    pub awake_fraction: T,
    pub high_freq_fraction: T,
    pub wakeup_count: u64,
}

pub fn simulate<T: Scalar>(
    scenario: &Scenario<T>,
    duration_ms: u64,
    params: &EnergyParams<T>,
) -> Result<EnergyReport<T>, EnergyError> {
    params.validate()?;
    if let Some(i) = scenario.min_interval() {
        if duration_ms < i.saturating_mul(10) {
            return Err(EnergyError::DurationTooShort {
                duration_ms,
                interval_ms: i,
            });
        }
    }
    let zero = T::zero();
    let one = T::one();
    let duration: T = c(duration_ms as f64);
    let threshold: T = c(COARSE_THRESHOLD_MS as f64);

    let mut held = scenario.wakelock || scenario.screen_on;
    let mut coarse_awake = zero;
    let mut high = if scenario.screen_on {
        params.in_use_busy_fraction
    } else {
        zero
    };
    let mut extra_ma = zero;
    let mut wakeups = 0u64;

    for load in &scenario.loads {
        match *load {
            Load::Polling {
                interval_ms,
                work_scale,
            } => {
                let interval: T = c(interval_ms as f64);
                let work = params.poll_work_ms * work_scale;
                if interval <= threshold {
                    held = true;
                } else {
                    coarse_awake = coarse_awake + params.coarse_wakeup_ms.max(work) / interval;
                    wakeups += duration_ms / interval_ms;
                }
                high = high
                    + if interval < work + params.governor_scale_down_ms {
                        one
                    } else {
                        work / interval
                    };
            }
            Load::Events { rate_hz, work_ms } => {
                let busy = rate_hz * work_ms / c(1000.0);
                coarse_awake = coarse_awake + busy;
                high = high + busy;
                wakeups += (rate_hz * duration / c(1000.0)).to_u64().unwrap_or(0);
            }
            Load::Continuous {
                busy_fraction,
                extra_ma: ma,
            } => {
                held = true;
                high = high + busy_fraction;
                extra_ma = extra_ma + ma;
            }
        }
    }

    let awake = if held { one } else { coarse_awake.min(one) };
    if held && wakeups == 0 && !scenario.screen_on {
        wakeups = 1;
    }
    let high = high.min(awake);
    let screen = if scenario.screen_on {
        params.screen_on_ma
    } else {
        zero
    };
    let avg = params.i_sleep_ma
        + awake * params.awake_overhead_ma
        + high * params.i_cpu_high_ma
        + screen
        + extra_ma;
    Ok(EnergyReport {
        scenario: scenario.label.clone(),
        duration_ms,
        avg_current_ma: avg,
        awake_fraction: awake,
        high_freq_fraction: high,
        wakeup_count: wakeups,
    })
}

/// Reports for each scenario plus ratios of average current to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Comparison<T> {
    pub reports: Vec<EnergyReport<T>>,
    pub ratios: Vec<T>,
}

impl<T: Scalar> Comparison<T> {
    pub fn ratio(&self, label: &str) -> Option<T> {
        self.reports
            .iter()
            .position(|r| r.scenario == label)
            .map(|i| self.ratios[i])
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>8} {:>8} {:>9} {:>8}\n",
            "scenario", "avg_mA", "awake", "high", "wakeups", "ratio"
        );
        for (r, ratio) in self.reports.iter().zip(&self.ratios) {
            out.push_str(&format!(
                "{:<10} {:>10.3} {:>8.4} {:>8.4} {:>9} {:>8.4}\n",
                r.scenario,
                r.avg_current_ma.to_f64().unwrap_or(f64::NAN),
                r.awake_fraction.to_f64().unwrap_or(f64::NAN),
                r.high_freq_fraction.to_f64().unwrap_or(f64::NAN),
                r.wakeup_count,
                ratio.to_f64().unwrap_or(f64::NAN),
            ));
        }
        out
    }
}

pub fn compare<T: Scalar>(
    scenarios: &[Scenario<T>],
    duration_ms: u64,
    params: &EnergyParams<T>,
) -> Result<Comparison<T>, EnergyError> {
    let reports = scenarios
        .iter()
        .map(|s| simulate(s, duration_ms, params))
        .collect::<Result<Vec<_>, _>>()?;
    let base = reports.first().map_or(T::one(), |r| r.avg_current_ma);
    let ratios = reports.iter().map(|r| r.avg_current_ma / base).collect();
    Ok(Comparison { reports, ratios })
}

/// Target for A3 relative to the wakelocked idle device.
pub const A3_TARGET_RATIO: f64 = 1.12;
/// Minimum A4 drain relative to the wakelocked idle device.
pub const A4_MIN_RATIO: f64 = 2.0;

/// Outcome of the parameter search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub i_sleep_ma: f64,
    pub i_cpu_high_ma: f64,
    pub poll_work_ms: f64,
    pub a3_ratio: f64,
    pub a4_ratio: f64,
}

/// Grid search over `(i_sleep_ma, i_cpu_high_ma, poll_work_ms)` with the
/// awake overhead and scale-down delay held at 35 mA and 100 ms. Keeps
/// candidates with A4/Idle_wl at least 2.0 and picks the A3/Idle_wl ratio
/// closest to 1.12, preferring round currents on near ties.
pub fn calibrate() -> Calibration {
    let base = default_params::<f64>();
    let scenarios: Vec<Scenario<f64>> = ["idle_wl", "a3", "a4"]
        .iter()
        .map(|l| scenario(l).expect("built-in scenario"))
        .collect();
    let mut best: Option<(f64, Calibration)> = None;
    for sleep in (2..=20).map(f64::from) {
        for cpu in (4..=24).map(|k| f64::from(k) * 5.0) {
            for work in (4..=240).map(|k| f64::from(k) * 0.25) {
                let params = EnergyParams {
                    i_sleep_ma: sleep,
                    i_cpu_high_ma: cpu,
                    poll_work_ms: work,
                    ..base
                };
                let Ok(cmp) = compare(&scenarios, 600_000, &params) else {
                    continue;
                };
                let (a3, a4) = (cmp.ratios[1], cmp.ratios[2]);
                if a4 < A4_MIN_RATIO {
                    continue;
                }
                // Error rounded to 1e-3 so that near ties fall to the
                // preference for sleep = 8 mA and cpu = 55 mA.
                let err = ((a3 - A3_TARGET_RATIO).abs() * 1000.0).round();
                let pref = (sleep - 8.0).abs() / 8.0 + (cpu - 55.0).abs() / 55.0;
                let score = err * 10.0 + pref;
                if best.is_none_or(|(s, _)| score < s) {
                    best = Some((
                        score,
                        Calibration {
                            i_sleep_ma: sleep,
                            i_cpu_high_ma: cpu,
                            poll_work_ms: work,
                            a3_ratio: a3,
                            a4_ratio: a4,
                        },
                    ));
                }
            }
        }
    }
    best.expect("grid has a feasible point").1
}

#[cfg(test)]
mod tests;
