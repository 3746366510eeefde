//! Host counters read from the Linux `/proc` interfaces. Where those are
//! missing the collectors emit `source_unavailable` records.

use std::collections::BTreeMap;
use std::fs;

use serde_json::{json, Map, Value};

use crate::model::Options;
use crate::plugin_kit::instance::{source_unavailable, PollingSource};
use crate::plugin_kit::reporter::Emission;

const CPU_FIELDS: [&str; 8] = [
    "user", "nice", "system", "idle", "iowait", "irq", "softirq", "steal",
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct CpuTimes {
    fields: [u64; 8],
}

impl CpuTimes {
    fn total(&self) -> u64 {
        self.fields.iter().sum()
    }

    fn idle(&self) -> u64 {
        self.fields[3] + self.fields[4]
    }

    fn busy_since(&self, prev: &CpuTimes) -> Option<f64> {
        let dt = self.total().checked_sub(prev.total())?;
        let di = self.idle().checked_sub(prev.idle())?;
        (dt > 0).then(|| (dt - di) as f64 / dt as f64)
    }
}

/// Parse the `cpu` lines of `/proc/stat`; the aggregate line is keyed "cpu".
pub(crate) fn parse_proc_stat(text: &str) -> BTreeMap<String, CpuTimes> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| l.starts_with("cpu")) {
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let mut t = CpuTimes::default();
        for (slot, v) in t.fields.iter_mut().zip(parts) {
            *slot = v.parse().unwrap_or(0);
        }
        out.insert(name.to_string(), t);
    }
    out
}

pub(super) struct CpuStats {
    per_core: bool,
    prev: BTreeMap<String, CpuTimes>,
}

impl CpuStats {
    pub(super) fn from_options(o: &Options) -> Self {
        CpuStats {
            per_core: o["per_core"].as_bool().unwrap_or(false),
            prev: BTreeMap::new(),
        }
    }
}

impl PollingSource for CpuStats {
    fn poll(&mut self, _now_ms: i64) -> Vec<Emission> {
        let text = match fs::read_to_string("/proc/stat") {
            Ok(t) => t,
            Err(e) => return vec![source_unavailable(format!("/proc/stat: {e}"))],
        };
        let now = parse_proc_stat(&text);
        let Some(agg) = now.get("cpu") else {
            return vec![source_unavailable("/proc/stat has no aggregate cpu line")];
        };
        let mut payload = Map::new();
        for (name, v) in CPU_FIELDS.iter().zip(agg.fields) {
            payload.insert((*name).into(), v.into());
        }
        let busy = self.prev.get("cpu").and_then(|p| agg.busy_since(p));
        payload.insert("busy_fraction".into(), json!(busy));
        if self.per_core {
            let cores: Map<String, Value> = now
                .iter()
                .filter(|(k, _)| k.as_str() != "cpu")
                .map(|(k, t)| {
                    let b = self.prev.get(k).and_then(|p| t.busy_since(p));
                    (k.clone(), json!({ "busy_fraction": b }))
                })
                .collect();
            payload.insert("cores".into(), Value::Object(cores));
        }
        self.prev = now;
        vec![Emission::Structured(Value::Object(payload))]
    }
}

/// `/proc/meminfo` values in bytes, keyed by field name.
pub(crate) fn parse_meminfo(text: &str) -> BTreeMap<String, u64> {
    text.lines()
        .filter_map(|line| {
            let (key, rest) = line.split_once(':')?;
            let mut parts = rest.split_whitespace();
            let n: u64 = parts.next()?.parse().ok()?;
            let mult = if parts.next() == Some("kB") { 1024 } else { 1 };
            Some((key.trim().to_string(), n * mult))
        })
        .collect()
}

pub(crate) fn mem_payload(info: &BTreeMap<String, u64>) -> Result<Value, String> {
    let total = *info.get("MemTotal").ok_or("MemTotal missing")?;
    let free = info.get("MemFree").copied().unwrap_or(0);
    let available = info.get("MemAvailable").copied().unwrap_or(free).min(total);
    Ok(json!({
        "total_bytes": total,
        "free_bytes": free,
        "available_bytes": available,
        "used_bytes": total - available,
        "swap_total_bytes": info.get("SwapTotal").copied().unwrap_or(0),
        "swap_free_bytes": info.get("SwapFree").copied().unwrap_or(0),
    }))
}

pub(super) struct MemStats;

impl PollingSource for MemStats {
    fn poll(&mut self, _now_ms: i64) -> Vec<Emission> {
        let payload = fs::read_to_string("/proc/meminfo")
            .map_err(|e| format!("/proc/meminfo: {e}"))
            .and_then(|t| mem_payload(&parse_meminfo(&t)));
        vec![match payload {
            Ok(v) => Emission::Structured(v),
            Err(e) => source_unavailable(e),
        }]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct IfaceCounters {
    rx_bytes: u64,
    rx_packets: u64,
    tx_bytes: u64,
    tx_packets: u64,
}

pub(crate) fn parse_net_dev(text: &str) -> BTreeMap<String, IfaceCounters> {
    text.lines()
        .skip(2)
        .filter_map(|line| {
            let (name, rest) = line.split_once(':')?;
            let n: Vec<u64> = rest
                .split_whitespace()
                .map(|v| v.parse().unwrap_or(0))
                .collect();
            if n.len() < 10 {
                return None;
            }
            Some((
                name.trim().to_string(),
                IfaceCounters {
                    rx_bytes: n[0],
                    rx_packets: n[1],
                    tx_bytes: n[8],
                    tx_packets: n[9],
                },
            ))
        })
        .collect()
}

pub(super) struct NetStats {
    include_loopback: bool,
    interface: String,
}

impl NetStats {
    pub(super) fn from_options(o: &Options) -> Self {
        NetStats {
            include_loopback: o["include_loopback"].as_bool().unwrap_or(false),
            interface: o["interface"].as_text().unwrap_or("").to_string(),
        }
    }

    pub(crate) fn payload(&self, ifaces: &BTreeMap<String, IfaceCounters>) -> Value {
        let mut per = Map::new();
        let (mut rx, mut tx) = (0u64, 0u64);
        for (name, c) in ifaces {
            if name == "lo" && !self.include_loopback {
                continue;
            }
            if !self.interface.is_empty() && *name != self.interface {
                continue;
            }
            rx += c.rx_bytes;
            tx += c.tx_bytes;
            per.insert(
                name.clone(),
                json!({
                    "rx_bytes": c.rx_bytes,
                    "rx_packets": c.rx_packets,
                    "tx_bytes": c.tx_bytes,
                    "tx_packets": c.tx_packets,
                }),
            );
        }
        json!({ "rx_bytes": rx, "tx_bytes": tx, "interfaces": per })
    }
}

impl PollingSource for NetStats {
    fn poll(&mut self, _now_ms: i64) -> Vec<Emission> {
        match fs::read_to_string("/proc/net/dev") {
            Ok(t) => vec![Emission::Structured(self.payload(&parse_net_dev(&t)))],
            Err(e) => vec![source_unavailable(format!("/proc/net/dev: {e}"))],
        }
    }
}

/// Parse `/proc/<pid>/stat` into (pid, name, state, rss_pages).
pub(crate) fn parse_pid_stat(text: &str) -> Option<(u64, String, String, i64)> {
    let open = text.find('(')?;
    let close = text.rfind(')')?;
    let pid = text[..open].trim().parse().ok()?;
    let name = text[open + 1..close].to_string();
    let rest: Vec<&str> = text[close + 1..].split_whitespace().collect();
    let state = rest.first()?.to_string();
    // rss is field 24 overall, i.e. index 21 after the name.
    let rss = rest.get(21).and_then(|v| v.parse().ok()).unwrap_or(0);
    Some((pid, name, state, rss))
}

pub(super) struct ProcList {
    max_entries: usize,
}

impl ProcList {
    pub(super) fn from_options(o: &Options) -> Self {
        ProcList {
            max_entries: o["max_entries"].as_i64().unwrap_or(50).max(1) as usize,
        }
    }
}

impl PollingSource for ProcList {
    fn poll(&mut self, _now_ms: i64) -> Vec<Emission> {
        let dir = match fs::read_dir("/proc") {
            Ok(d) => d,
            Err(e) => return vec![source_unavailable(format!("/proc: {e}"))],
        };
        let mut procs: Vec<_> = dir
            .filter_map(Result::ok)
            .filter(|e| {
                e.file_name()
                    .to_string_lossy()
                    .bytes()
                    .all(|b| b.is_ascii_digit())
            })
            .filter_map(|e| fs::read_to_string(e.path().join("stat")).ok())
            .filter_map(|t| parse_pid_stat(&t))
            .collect();
        procs.sort_by_key(|p| p.0);
        let count = procs.len();
        let list: Vec<Value> = procs
            .into_iter()
            .take(self.max_entries)
            .map(|(pid, name, state, rss)| {
                json!({"pid": pid, "name": name, "state": state, "rss_pages": rss})
            })
            .collect();
        vec![Emission::Structured(
            json!({ "count": count, "processes": list }),
        )]
    }
}
