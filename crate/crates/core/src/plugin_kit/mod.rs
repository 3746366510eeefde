//! The plugin contract, the compiled-in registry and the built-in collectors.
//!
//! Plugins come in two kinds. Polling plugins are sampled by the scheduler at
//! a configured interval; event plugins subscribe to an [`EventBus`] and emit
//! one record per matching event. Either way, records leave a plugin only
//! through its bound [`Reporter`], which enforces the experiment's granted
//! capabilities.

mod builtin;
mod bus;
mod descriptor;
mod instance;
mod reporter;

use thiserror::Error;

pub use builtin::{synth_noise, synth_value, SYNTH_NOISE_FRACTION};
pub use bus::{BusEvent, EventBus, EventTopic, SubscriptionId};
pub use descriptor::{OptionSpec, OptionType, PluginDescriptor};
pub use instance::{
    source_unavailable, EventSource, FeedGuard, PluginInstance, PollFailure, PollingSource,
};
pub use reporter::{Appended, Emission, Gate, MemorySink, RecordSink, ReportError, Reporter};

use crate::model::{Options, PluginKind};
use instance::Behavior;

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("plugin `{plugin_id}` has no option `{option}`")]
    UnknownOption { plugin_id: String, option: String },
    #[error("option `{plugin_id}.{option}`: {reason}")]
    InvalidOption {
        plugin_id: String,
        option: String,
        reason: String,
    },
    #[error("plugin `{plugin_id}` is not a {expected} plugin")]
    WrongKind {
        plugin_id: String,
        expected: PluginKind,
    },
    #[error("plugin `{plugin_id}`: {reason}")]
    Source { plugin_id: String, reason: String },
}

type Factory = fn(&Options) -> Result<Behavior, PluginError>;

/// Immutable table of compiled-in plugins.
pub struct Registry {
    descriptors: Vec<PluginDescriptor>,
    factories: Vec<Factory>,
}

impl Registry {
    /// The shipped collector set, in stable order.
    pub fn builtin() -> Self {
        let mut descriptors = Vec::new();
        let mut factories = Vec::new();
        for (d, f) in builtin::all() {
            descriptors.push(d);
            factories.push(f);
        }
        Registry {
            descriptors,
            factories,
        }
    }

    pub fn describe_all(&self) -> &[PluginDescriptor] {
        &self.descriptors
    }

    pub fn descriptor(&self, plugin_id: &str) -> Option<&PluginDescriptor> {
        self.descriptors.iter().find(|d| d.plugin_id == plugin_id)
    }

    /// Validate `options` and fill in defaults for missing ones.
    pub fn resolve_options(
        &self,
        plugin_id: &str,
        options: &Options,
    ) -> Result<Options, PluginError> {
        let desc = self
            .descriptor(plugin_id)
            .ok_or_else(|| PluginError::UnknownPlugin(plugin_id.into()))?;
        let mut resolved = Options::new();
        for (name, value) in options {
            let schema = desc
                .option(name)
                .ok_or_else(|| PluginError::UnknownOption {
                    plugin_id: plugin_id.into(),
                    option: name.clone(),
                })?;
            schema
                .check(value)
                .map_err(|reason| PluginError::InvalidOption {
                    plugin_id: plugin_id.into(),
                    option: name.clone(),
                    reason,
                })?;
            resolved.insert(name.clone(), value.clone());
        }
        for schema in &desc.option_schema {
            resolved
                .entry(schema.name.clone())
                .or_insert_with(|| schema.default.clone());
        }
        Ok(resolved)
    }

    /// Create an initialized instance bound to `reporter`. Nothing is
    /// emitted until it is polled or subscribed.
    pub fn instantiate(
        &self,
        plugin_id: &str,
        options: &Options,
        reporter: &Reporter,
    ) -> Result<PluginInstance, PluginError> {
        let idx = self
            .descriptors
            .iter()
            .position(|d| d.plugin_id == plugin_id)
            .ok_or_else(|| PluginError::UnknownPlugin(plugin_id.into()))?;
        let resolved = self.resolve_options(plugin_id, options)?;
        let desc = self.descriptors[idx].clone();
        let behavior = (self.factories[idx])(&resolved)?;
        let bound = reporter.bind(&desc.plugin_id, &desc.required_capabilities);
        Ok(PluginInstance::new(desc, resolved, bound, behavior))
    }
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.descriptors.iter().map(|d| &d.plugin_id))
            .finish()
    }
}
