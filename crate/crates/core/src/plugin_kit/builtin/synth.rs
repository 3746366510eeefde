use std::f64::consts::PI;

use serde_json::json;

use crate::model::Options;
use crate::plugin_kit::instance::PollingSource;
use crate::plugin_kit::reporter::Emission;

/// Noise amplitude as a fraction of the signal amplitude.
pub const SYNTH_NOISE_FRACTION: f64 = 0.01;

const LCG_MUL: u64 = 6_364_136_223_846_793_005;
const LCG_INC: u64 = 1_442_695_040_888_963_407;

/// Advance the noise generator and return a sample in `[-1, 1)`.
pub fn synth_noise(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(LCG_MUL).wrapping_add(LCG_INC);
    let unit = (*state >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}

/// Noise-free signal at `t_ms`.
pub fn synth_value(amplitude: f64, frequency_hz: f64, t_ms: i64) -> f64 {
    // Reduce to a phase in [0, 1) first; t_ms is ~1e12 so the raw angle
    // would lose precision.
    let cycles = (frequency_hz * (t_ms as f64 / 1000.0)).fract();
    amplitude * (2.0 * PI * cycles).sin()
}

pub(super) struct SynthSensor {
    amplitude: f64,
    frequency_hz: f64,
    scale: f64,
    state: u64,
}

impl SynthSensor {
    pub(super) fn from_options(o: &Options) -> Self {
        let precision = o["precision"].as_i64().unwrap_or(2).clamp(0, 12) as i32;
        SynthSensor {
            amplitude: o["amplitude"].as_f64().unwrap_or(1.0),
            frequency_hz: o["frequency_hz"].as_f64().unwrap_or(1.0),
            scale: 10f64.powi(precision),
            state: o["seed"].as_i64().unwrap_or(1) as u64,
        }
    }
}

impl PollingSource for SynthSensor {
    fn poll(&mut self, now_ms: i64) -> Vec<Emission> {
        let noise = synth_noise(&mut self.state) * SYNTH_NOISE_FRACTION * self.amplitude;
        let raw = synth_value(self.amplitude, self.frequency_hz, now_ms) + noise;
        let mut value = (raw * self.scale).round() / self.scale;
        if value == 0.0 {
            value = 0.0; // no "-0.0" in the output
        }
        vec![Emission::Structured(json!({ "value": value }))]
    }
}
