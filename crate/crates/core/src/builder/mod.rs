//! The experiment builder: turns a researcher's configuration into a signed
//! package that selects plugins from the compiled-in registry and requests
//! exactly the capabilities those plugins need.

mod keys;
mod package;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use keys::{KeyError, PublicKey, SigningKey, ALGORITHM, PUBLIC_KEY_FILE, SECRET_KEY_FILE};
pub use package::{
    ExperimentPackage, LockEntry, PluginsLock, SignatureFile, VerifyFailure, LOCK_FILE,
    MANIFEST_FILE, SIGNATURE_FILE,
};

use crate::model::{
    validate_manifest, Capability, ExperimentManifest, GlobalWakePolicy, Options, PluginConfig,
    PluginKind, UploadPolicy, Violation, SCHEMA_VERSION,
};
use crate::plugin_kit::Registry;

/// Namespace for experiment ids derived from author key and name.
const EXPERIMENT_NAMESPACE: Uuid = Uuid::from_u128(0x6f1d_42c3_8a57_4e0b_9c2d_7b5e_13a4_f860);

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("{} violation(s):\n  {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n  "))]
    Violations(Vec<Violation>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One plugin selection in a build configuration. `kind` and `interval_ms`
/// default to the registry's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginChoice {
    pub plugin_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PluginKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_ms: Option<u64>,
    #[serde(default)]
    pub options: Options,
}

impl PluginChoice {
    pub fn new(plugin_id: impl Into<String>) -> Self {
        PluginChoice {
            plugin_id: plugin_id.into(),
            kind: None,
            interval_ms: None,
            options: Options::new(),
        }
    }

    pub fn every(mut self, interval_ms: u64) -> Self {
        self.interval_ms = Some(interval_ms);
        self
    }
}

/// The researcher-facing build configuration (`exp.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub version: String,
    pub author_name: String,
    #[serde(default)]
    pub description: String,
    /// Fixed experiment id. When absent the id is derived from the signing
    /// key and the name, so every version of an experiment shares it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<Uuid>,
    pub plugins: Vec<PluginChoice>,
    /// Capabilities the author expects to request. When present they must
    /// equal what the selected plugins need.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<BTreeSet<Capability>>,
    #[serde(default)]
    pub wake_policy: GlobalWakePolicy,
    #[serde(default)]
    pub upload_policy: UploadPolicy,
}

impl ExperimentConfig {
    pub fn new(name: &str, version: &str, author: &str, plugins: Vec<PluginChoice>) -> Self {
        ExperimentConfig {
            name: name.into(),
            version: version.into(),
            author_name: author.into(),
            description: String::new(),
            experiment_id: None,
            plugins,
            capabilities: None,
            wake_policy: GlobalWakePolicy::default(),
            upload_policy: UploadPolicy::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BuildError> {
        let bytes = std::fs::read(path).map_err(|source| BuildError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| BuildError::Config(e.to_string()))
    }

    /// Resolve plugin kinds and intervals against the registry.
    pub fn plugin_configs(&self, registry: &Registry) -> Result<Vec<PluginConfig>, BuildError> {
        self.plugins
            .iter()
            .map(|c| {
                let desc = registry
                    .descriptor(&c.plugin_id)
                    .ok_or_else(|| BuildError::UnknownPlugin(c.plugin_id.clone()))?;
                let kind = c.kind.unwrap_or(desc.kind);
                let interval_ms = match kind {
                    PluginKind::Polling => c.interval_ms.or(desc.default_interval_ms),
                    PluginKind::Event => c.interval_ms,
                };
                Ok(PluginConfig {
                    plugin_id: c.plugin_id.clone(),
                    kind,
                    interval_ms,
                    options: c.options.clone(),
                })
            })
            .collect()
    }
}

/// Exact union of the capabilities the selected plugins require.
pub fn compute_capabilities(
    configs: &[PluginConfig],
    registry: &Registry,
) -> Result<BTreeSet<Capability>, BuildError> {
    let mut out = BTreeSet::new();
    for c in configs {
        let desc = registry
            .descriptor(&c.plugin_id)
            .ok_or_else(|| BuildError::UnknownPlugin(c.plugin_id.clone()))?;
        out.extend(desc.required_capabilities.iter().copied());
    }
    Ok(out)
}

/// Human-readable table of every registered plugin.
pub fn list_plugins(registry: &Registry) -> String {
    let mut rows = vec![[
        "PLUGIN".to_string(),
        "KIND".to_string(),
        "INTERVAL".to_string(),
        "CAPABILITIES".to_string(),
        "OPTIONS".to_string(),
    ]];
    for d in registry.describe_all() {
        let caps: Vec<&str> = d.required_capabilities.iter().map(|c| c.as_str()).collect();
        let opts: Vec<String> = d
            .option_schema
            .iter()
            .map(|o| format!("{}={}", o.name, o.default))
            .collect();
        rows.push([
            d.plugin_id.clone(),
            d.kind.to_string(),
            d.default_interval_ms
                .map_or_else(|| "-".into(), |i| format!("{i} ms")),
            caps.join(","),
            if opts.is_empty() {
                "-".into()
            } else {
                opts.join(" ")
            },
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        for (i, w) in widths.iter().enumerate() {
            let _ = write!(out, "{:<w$}  ", r[i], w = *w);
        }
        out.push_str(&r[4]);
        out.push('\n');
    }
    out
}

/// Assemble and sign a package. All validation problems are reported at once.
pub fn build_package(
    config: &ExperimentConfig,
    key: &SigningKey,
    registry: &Registry,
    created_ts: i64,
) -> Result<ExperimentPackage, BuildError> {
    let configs = config.plugin_configs(registry)?;
    let required = compute_capabilities(&configs, registry)?;
    let fingerprint = key.fingerprint();
    let manifest = ExperimentManifest {
        schema_version: SCHEMA_VERSION,
        experiment_id: config.experiment_id.unwrap_or_else(|| {
            Uuid::new_v5(
                &EXPERIMENT_NAMESPACE,
                format!("{fingerprint}/{}", config.name).as_bytes(),
            )
        }),
        name: config.name.clone(),
        version: config.version.clone(),
        author_name: config.author_name.clone(),
        author_key_fingerprint: fingerprint,
        description: config.description.clone(),
        created_ts,
        plugin_configs: configs,
        capabilities: config.capabilities.clone().unwrap_or(required),
        wake_policy: config.wake_policy,
        upload_policy: config.upload_policy.clone(),
    };
    let violations = validate_manifest(&manifest, registry.describe_all());
    if !violations.is_empty() {
        return Err(BuildError::Violations(violations));
    }
    let lock = PluginsLock {
        plugins: manifest
            .plugin_configs
            .iter()
            .map(|c| LockEntry {
                plugin_id: c.plugin_id.clone(),
                descriptor_digest: registry
                    .descriptor(&c.plugin_id)
                    .expect("validated plugin")
                    .digest(),
            })
            .collect(),
    };
    let mut pkg = ExperimentPackage::new(&manifest, &lock);
    pkg.sign(key);
    Ok(pkg)
}

/// Build from a config file and write the package atomically to `out`.
pub fn build(
    config_path: &Path,
    key: &SigningKey,
    out: &Path,
    created_ts: i64,
) -> Result<ExperimentPackage, BuildError> {
    let config = ExperimentConfig::load(config_path)?;
    let pkg = build_package(&config, key, &Registry::builtin(), created_ts)?;
    crate::fsutil::write_atomic(out, &pkg.to_zip()).map_err(|source| BuildError::Io {
        path: out.display().to_string(),
        source,
    })?;
    Ok(pkg)
}
