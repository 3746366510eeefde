use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime};

use crate::model::Options;
use crate::plugin_kit::bus::{BusEvent, EventBus, EventTopic};
use crate::plugin_kit::instance::{EventSource, FeedGuard};
use crate::plugin_kit::reporter::Emission;
use crate::plugin_kit::PluginError;

pub(super) struct ClockEvents {
    monitor_host: bool,
    check_interval: Duration,
    jump_threshold_ms: i64,
}

impl ClockEvents {
    pub(super) fn from_options(o: &Options) -> Arc<Mutex<Box<dyn EventSource>>> {
        Arc::new(Mutex::new(Box::new(ClockEvents {
            monitor_host: o["monitor_host"].as_bool().unwrap_or(true),
            check_interval: Duration::from_millis(
                o["check_interval_ms"].as_i64().unwrap_or(1_000).max(10) as u64,
            ),
            jump_threshold_ms: o["jump_threshold_ms"].as_i64().unwrap_or(2_000),
        })))
    }
}

impl EventSource for ClockEvents {
    fn topic(&self) -> EventTopic {
        EventTopic::Clock
    }

    fn on_event(&mut self, event: &BusEvent) -> Option<Emission> {
        Some(Emission::Structured(event.data.clone()))
    }

    fn start_feed(&mut self, bus: &Arc<EventBus>) -> Result<Option<FeedGuard>, PluginError> {
        if !self.monitor_host {
            return Ok(None);
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let bus = bus.clone();
        let interval = self.check_interval;
        let threshold = self.jump_threshold_ms;
        let handle = std::thread::Builder::new()
            .name("clock-events".into())
            .spawn(move || monitor(bus, flag, interval, threshold))
            .map_err(|e| PluginError::Source {
                plugin_id: "clock_events".into(),
                reason: e.to_string(),
            })?;
        Ok(Some(Box::new(MonitorGuard {
            stop,
            handle: Some(handle),
        })))
    }
}

struct MonitorGuard {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for MonitorGuard {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Best guess at the host's configured timezone name.
fn host_timezone() -> String {
    if let Ok(tz) = std::env::var("TZ") {
        if !tz.is_empty() {
            return tz;
        }
    }
    if let Ok(target) = std::fs::read_link("/etc/localtime") {
        let s = target.to_string_lossy();
        if let Some(idx) = s.find("zoneinfo/") {
            return s[idx + "zoneinfo/".len()..].to_string();
        }
        return s.into_owned();
    }
    std::fs::read_to_string("/etc/timezone")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "UTC".into())
}

fn wall_ms() -> i64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn monitor(bus: Arc<EventBus>, stop: Arc<AtomicBool>, interval: Duration, threshold_ms: i64) {
    let mut zone = host_timezone();
    let mut wall = wall_ms();
    let mut mono = Instant::now();
    let step = Duration::from_millis(20);
    while !stop.load(Ordering::SeqCst) {
        let mut slept = Duration::ZERO;
        while slept < interval && !stop.load(Ordering::SeqCst) {
            std::thread::sleep(step);
            slept += step;
        }
        let now_zone = host_timezone();
        if now_zone != zone {
            bus.publish(&BusEvent::timezone_changed(&zone, &now_zone));
            zone = now_zone;
        }
        let (w, m) = (wall_ms(), Instant::now());
        let drift = (w - wall) - m.duration_since(mono).as_millis() as i64;
        if drift.abs() >= threshold_ms {
            bus.publish(&BusEvent::clock_jump(drift));
        }
        wall = w;
        mono = m;
    }
}
