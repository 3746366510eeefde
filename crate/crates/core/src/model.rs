//! Shared domain types: experiment manifests, plugin configurations, log
//! records and chunk metadata.
//!
//! Manifests are UTF-8 JSON. The canonical byte form (sorted keys, no
//! insignificant whitespace, shortest number form) is what gets signed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::canonical::canonical_json;
use crate::plugin_kit::PluginDescriptor;

/// Manifest schema versions this build understands.
pub const SCHEMA_VERSION: u32 = 1;

/// Smallest polling interval a manifest may request.
pub const MIN_INTERVAL_MS: u64 = 10;

/// Polling intervals at or below this need precise timers (a held wakelock).
/// Above it, coarse wake-ups are enough.
pub const COARSE_THRESHOLD_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
    #[error("unsupported schema_version {0} (supported: {SCHEMA_VERSION})")]
    UnsupportedSchema(u64),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

/// A declared right to access one class of host data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Capability {
    SysCpu,
    SysMem,
    NetTraffic,
    ProcList,
    FsEvents,
    ClockEvents,
    ActivityState,
    SensorSynth,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::SysCpu,
        Capability::SysMem,
        Capability::NetTraffic,
        Capability::ProcList,
        Capability::FsEvents,
        Capability::ClockEvents,
        Capability::ActivityState,
        Capability::SensorSynth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::SysCpu => "SYS_CPU",
            Capability::SysMem => "SYS_MEM",
            Capability::NetTraffic => "NET_TRAFFIC",
            Capability::ProcList => "PROC_LIST",
            Capability::FsEvents => "FS_EVENTS",
            Capability::ClockEvents => "CLOCK_EVENTS",
            Capability::ActivityState => "ACTIVITY_STATE",
            Capability::SensorSynth => "SENSOR_SYNTH",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Capability {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ModelError::UnknownCapability(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginKind {
    Event,
    Polling,
}

impl fmt::Display for PluginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginKind::Event => "event",
            PluginKind::Polling => "polling",
        })
    }
}

/// A scalar plugin option value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OptionValue {
    Boolean(bool),
    Integer(i64),
    Decimal(f64),
    Text(String),
}

impl OptionValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            OptionValue::Integer(i) => Some(i as f64),
            OptionValue::Decimal(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            OptionValue::Integer(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            OptionValue::Boolean(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            OptionValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for OptionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptionValue::Boolean(b) => write!(f, "{b}"),
            OptionValue::Integer(i) => write!(f, "{i}"),
            OptionValue::Decimal(d) => write!(f, "{d:?}"),
            OptionValue::Text(s) => write!(f, "{s:?}"),
        }
    }
}

pub type Options = BTreeMap<String, OptionValue>;

/// One configured plugin inside a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub plugin_id: String,
    pub kind: PluginKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_ms: Option<u64>,
    #[serde(default)]
    pub options: Options,
}

impl PluginConfig {
    pub fn polling(plugin_id: impl Into<String>, interval_ms: u64) -> Self {
        PluginConfig {
            plugin_id: plugin_id.into(),
            kind: PluginKind::Polling,
            interval_ms: Some(interval_ms),
            options: Options::new(),
        }
    }

    pub fn event(plugin_id: impl Into<String>) -> Self {
        PluginConfig {
            plugin_id: plugin_id.into(),
            kind: PluginKind::Event,
            interval_ms: None,
            options: Options::new(),
        }
    }

    pub fn with_option(mut self, name: impl Into<String>, value: OptionValue) -> Self {
        self.options.insert(name.into(), value);
        self
    }

    fn shape_problem(&self) -> Option<String> {
        match (self.kind, self.interval_ms) {
            (PluginKind::Polling, None) => Some(format!(
                "polling plugin `{}` has no interval_ms",
                self.plugin_id
            )),
            (PluginKind::Polling, Some(i)) if i < MIN_INTERVAL_MS => Some(format!(
                "plugin `{}` interval {i} ms is below the {MIN_INTERVAL_MS} ms minimum",
                self.plugin_id
            )),
            (PluginKind::Event, Some(_)) => Some(format!(
                "event plugin `{}` must not set interval_ms",
                self.plugin_id
            )),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalWakePolicy {
    pub allow_wakelocks: bool,
    /// Log only while the host activity signal reports "active".
    pub active_only: bool,
}

impl Default for GlobalWakePolicy {
    fn default() -> Self {
        GlobalWakePolicy {
            allow_wakelocks: true,
            active_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadPolicy {
    pub enabled: bool,
    pub server_url: String,
    pub unmetered_only: bool,
    pub period_minutes: u32,
    pub delete_after_ack: bool,
}

impl Default for UploadPolicy {
    fn default() -> Self {
        UploadPolicy {
            enabled: false,
            server_url: String::new(),
            unmetered_only: true,
            period_minutes: 60,
            delete_after_ack: true,
        }
    }
}

impl UploadPolicy {
    fn problem(&self) -> Option<String> {
        if self.period_minutes == 0 {
            return Some("upload period_minutes must be at least 1".into());
        }
        if self.enabled && self.server_url.trim().is_empty() {
            return Some("upload enabled without a server_url".into());
        }
        None
    }
}

/// The signed description of what an experiment logs and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub experiment_id: Uuid,
    pub name: String,
    pub version: String,
    pub author_name: String,
    pub author_key_fingerprint: String,
    pub description: String,
    pub created_ts: i64,
    pub plugin_configs: Vec<PluginConfig>,
    pub capabilities: BTreeSet<Capability>,
    pub wake_policy: GlobalWakePolicy,
    pub upload_policy: UploadPolicy,
}

impl ExperimentManifest {
    pub fn plugin(&self, plugin_id: &str) -> Option<&PluginConfig> {
        self.plugin_configs
            .iter()
            .find(|p| p.plugin_id == plugin_id)
    }

    /// Checks the invariants that need no plugin registry.
    pub fn check_shape(&self) -> Result<(), ModelError> {
        let problems = self.shape_problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(problems.join("; ")))
        }
    }

    fn shape_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        if self.plugin_configs.is_empty() {
            out.push("plugin_configs is empty".into());
        }
        let mut seen = BTreeSet::new();
        for p in &self.plugin_configs {
            if !seen.insert(p.plugin_id.as_str()) {
                out.push(format!("duplicate plugin_id `{}`", p.plugin_id));
            }
            out.extend(p.shape_problem());
            for (name, v) in &p.options {
                if let OptionValue::Decimal(d) = v {
                    if !d.is_finite() {
                        out.push(format!("option `{}.{name}` is not finite", p.plugin_id));
                    }
                }
            }
        }
        if self.created_ts <= 0 {
            out.push("created_ts must be positive".into());
        }
        out.extend(self.upload_policy.problem());
        out
    }
}

/// Parse a manifest from UTF-8 JSON, checking every registry-independent
/// invariant.
pub fn parse_manifest(bytes: &[u8]) -> Result<ExperimentManifest, ModelError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(ModelError::Malformed("empty input".into()));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Malformed(e.to_string()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ModelError::Malformed("top level is not an object".into()))?;

    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(ModelError::UnsupportedSchema(v)),
        None => return Err(ModelError::Malformed("missing schema_version".into())),
    }
    if let Some(caps) = obj.get("capabilities").and_then(Value::as_array) {
        for c in caps {
            let name = c
                .as_str()
                .ok_or_else(|| ModelError::Malformed("capability is not a string".into()))?;
            Capability::from_str(name)?;
        }
    }

    let manifest: ExperimentManifest =
        serde_json::from_value(value).map_err(|e| ModelError::Malformed(e.to_string()))?;
    manifest.check_shape()?;
    Ok(manifest)
}

/// Deterministic bytes for signing: sorted keys, minimal whitespace,
/// lists in declared order.
pub fn canonicalize_manifest(m: &ExperimentManifest) -> Vec<u8> {
    let value = serde_json::to_value(m).expect("manifest serializes");
    canonical_json(&value)
}

/// A single reason a manifest is not acceptable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Shape(String),
    UnknownPlugin(String),
    KindMismatch {
        plugin_id: String,
        expected: PluginKind,
    },
    UnknownOption {
        plugin_id: String,
        option: String,
    },
    InvalidOption {
        plugin_id: String,
        option: String,
        reason: String,
    },
    OverProvisioned(BTreeSet<Capability>),
    UnderProvisioned(BTreeSet<Capability>),
    WakePolicyConflict {
        plugin_id: String,
        interval_ms: u64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join =
            |s: &BTreeSet<Capability>| s.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ");
        match self {
            Violation::Shape(msg) => f.write_str(msg),
            Violation::UnknownPlugin(id) => write!(f, "unknown plugin `{id}`"),
            Violation::KindMismatch { plugin_id, expected } => {
                write!(f, "plugin `{plugin_id}` is a {expected} plugin")
            }
            Violation::UnknownOption { plugin_id, option } => {
                write!(f, "plugin `{plugin_id}` has no option `{option}`")
            }
            Violation::InvalidOption { plugin_id, option, reason } => {
                write!(f, "option `{plugin_id}.{option}`: {reason}")
            }
            Violation::OverProvisioned(extra) => {
                write!(f, "over-provisioned capabilities not required by any plugin: {}", join(extra))
            }
            Violation::UnderProvisioned(missing) => {
                write!(f, "missing capabilities required by plugins: {}", join(missing))
            }
            Violation::WakePolicyConflict { plugin_id, interval_ms } => write!(
                f,
                "plugin `{plugin_id}` polls every {interval_ms} ms, which needs precise timers, but wakelocks are disabled"
            ),
        }
    }
}

/// Check a manifest against the plugin registry. Returns every violation
/// found; an empty list means the manifest is acceptable.
pub fn validate_manifest(m: &ExperimentManifest, registry: &[PluginDescriptor]) -> Vec<Violation> {
    let mut out: Vec<Violation> = m
        .shape_problems()
        .into_iter()
        .map(Violation::Shape)
        .collect();

    let mut required = BTreeSet::new();
    for cfg in &m.plugin_configs {
        let Some(desc) = registry.iter().find(|d| d.plugin_id == cfg.plugin_id) else {
            out.push(Violation::UnknownPlugin(cfg.plugin_id.clone()));
            continue;
        };
        required.extend(desc.required_capabilities.iter().copied());
        if desc.kind != cfg.kind {
            out.push(Violation::KindMismatch {
                plugin_id: cfg.plugin_id.clone(),
                expected: desc.kind,
            });
        }
        for (name, value) in &cfg.options {
            match desc.option_schema.iter().find(|o| &o.name == name) {
                None => out.push(Violation::UnknownOption {
                    plugin_id: cfg.plugin_id.clone(),
                    option: name.clone(),
                }),
                Some(schema) => {
                    if let Err(reason) = schema.check(value) {
                        out.push(Violation::InvalidOption {
                            plugin_id: cfg.plugin_id.clone(),
                            option: name.clone(),
                            reason,
                        });
                    }
                }
            }
        }
        if let (PluginKind::Polling, Some(interval)) = (cfg.kind, cfg.interval_ms) {
            if !m.wake_policy.allow_wakelocks && interval <= COARSE_THRESHOLD_MS {
                out.push(Violation::WakePolicyConflict {
                    plugin_id: cfg.plugin_id.clone(),
                    interval_ms: interval,
                });
            }
        }
    }

    let extra: BTreeSet<_> = m.capabilities.difference(&required).copied().collect();
    if !extra.is_empty() {
        out.push(Violation::OverProvisioned(extra));
    }
    // Only meaningful when every plugin was resolved.
    if !out.iter().any(|v| matches!(v, Violation::UnknownPlugin(_))) {
        let missing: BTreeSet<_> = required.difference(&m.capabilities).copied().collect();
        if !missing.is_empty() {
            out.push(Violation::UnderProvisioned(missing));
        }
    }
    out
}

/// Compare dotted version strings by numeric components ("1.10" > "1.9").
/// Non-numeric components compare as text after all numeric ones.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut left = a.split('.');
    let mut right = b.split('.');
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (Some(x), None) => {
                if x.trim_start_matches('0').is_empty()
                    && left.clone().all(|r| r.trim_start_matches('0').is_empty())
                {
                    return Ordering::Equal;
                }
                return Ordering::Greater;
            }
            (None, Some(y)) => {
                if y.trim_start_matches('0').is_empty()
                    && right.clone().all(|r| r.trim_start_matches('0').is_empty())
                {
                    return Ordering::Equal;
                }
                return Ordering::Less;
            }
            (Some(x), Some(y)) => {
                let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
                    (Ok(p), Ok(q)) => p.cmp(&q),
                    (Ok(_), Err(_)) => Ordering::Less,
                    (Err(_), Ok(_)) => Ordering::Greater,
                    (Err(_), Err(_)) => x.cmp(y),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

/// Reference to raw bytes stored next to the record stream in a chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub blob_name: String,
    pub byte_len: u64,
    pub content_crc32: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Structured,
    Blob,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordBody {
    Structured(Value),
    Blob(BlobRef),
}

/// One timestamped datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordLine", into = "RecordLine")]
pub struct LogRecord {
    pub ts_ms: i64,
    pub plugin_id: String,
    pub seq: u64,
    pub body: RecordBody,
}

impl LogRecord {
    pub fn payload_kind(&self) -> PayloadKind {
        match self.body {
            RecordBody::Structured(_) => PayloadKind::Structured,
            RecordBody::Blob(_) => PayloadKind::Blob,
        }
    }

    pub fn payload(&self) -> Option<&Value> {
        match &self.body {
            RecordBody::Structured(v) => Some(v),
            RecordBody::Blob(_) => None,
        }
    }

    pub fn blob_ref(&self) -> Option<&BlobRef> {
        match &self.body {
            RecordBody::Blob(b) => Some(b),
            RecordBody::Structured(_) => None,
        }
    }

    /// One JSON Lines entry, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    ts_ms: i64,
    plugin_id: String,
    seq: u64,
    payload_kind: PayloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob_ref: Option<BlobRef>,
}

impl TryFrom<RecordLine> for LogRecord {
    type Error = String;

    fn try_from(line: RecordLine) -> Result<Self, Self::Error> {
        if line.ts_ms <= 0 {
            return Err(format!("record ts_ms {} is not positive", line.ts_ms));
        }
        let body = match (line.payload_kind, line.payload, line.blob_ref) {
            (PayloadKind::Structured, Some(p), None) => RecordBody::Structured(p),
            (PayloadKind::Blob, None, Some(b)) => RecordBody::Blob(b),
            _ => return Err("exactly one of payload / blob_ref must match payload_kind".into()),
        };
        Ok(LogRecord {
            ts_ms: line.ts_ms,
            plugin_id: line.plugin_id,
            seq: line.seq,
            body,
        })
    }
}

impl From<LogRecord> for RecordLine {
    fn from(r: LogRecord) -> Self {
        let payload_kind = r.payload_kind();
        let (payload, blob_ref) = match r.body {
            RecordBody::Structured(v) => (Some(v), None),
            RecordBody::Blob(b) => (None, Some(b)),
        };
        RecordLine {
            ts_ms: r.ts_ms,
            plugin_id: r.plugin_id,
            seq: r.seq,
            payload_kind,
            payload,
            blob_ref,
        }
    }
}

/// Integrity and extent metadata of one sealed chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub chunk_id: Uuid,
    pub experiment_id: Uuid,
    pub device_id: Uuid,
    pub chunk_seq: u64,
    pub first_ts: i64,
    pub last_ts: i64,
    pub record_count: u64,
    pub blob_count: u64,
    pub records_crc32: u32,
    pub uncompressed_bytes: u64,
    pub compressed_bytes: u64,
    pub schema_version: u32,
}

impl ChunkManifest {
    pub fn compression_ratio(&self) -> f64 {
        if self.uncompressed_bytes == 0 {
            return 0.0;
        }
        self.compressed_bytes as f64 / self.uncompressed_bytes as f64
    }
}

/// Identity of the device an agent runs on, generated once and persisted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub device_id: Uuid,
    pub platform_label: String,
}

impl DeviceIdentity {
    pub fn generate() -> Self {
        DeviceIdentity {
            device_id: Uuid::new_v4(),
            platform_label: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        }
    }

    /// Read the identity at `path`, creating it on first use.
    pub fn load_or_create(path: &Path) -> std::io::Result<Self> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let id = DeviceIdentity::generate();
                let bytes = serde_json::to_vec_pretty(&id).expect("identity serializes");
                crate::fsutil::write_atomic(path, &bytes)?;
                Ok(id)
            }
            Err(e) => Err(e),
        }
    }
}
