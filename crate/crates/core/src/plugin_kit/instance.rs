use std::any::Any;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use super::bus::{BusEvent, EventBus, EventTopic, SubscriptionId};
use super::reporter::{Emission, ReportError, Reporter};
use super::{PluginDescriptor, PluginError};
use crate::model::{Options, PluginKind};

/// A collector sampled at a fixed interval.
pub trait PollingSource: Send {
    /// Read the current value(s). Source failures are reported as structured
    /// error payloads rather than errors.
    fn poll(&mut self, now_ms: i64) -> Vec<Emission>;
}

/// Keeps a host-side event feed alive; dropping it stops the feed.
pub type FeedGuard = Box<dyn Any + Send>;

/// A collector notified through the event bus.
pub trait EventSource: Send {
    fn topic(&self) -> EventTopic;

    fn matches(&self, _event: &BusEvent) -> bool {
        true
    }

    fn on_event(&mut self, event: &BusEvent) -> Option<Emission>;

    /// Start whatever host watcher feeds `bus` for this plugin.
    fn start_feed(&mut self, _bus: &Arc<EventBus>) -> Result<Option<FeedGuard>, PluginError> {
        Ok(None)
    }
}

pub(crate) enum Behavior {
    Polling(Box<dyn PollingSource>),
    Event(Arc<Mutex<Box<dyn EventSource>>>),
}

struct Subscription {
    bus: Arc<EventBus>,
    id: SubscriptionId,
    _feed: Option<FeedGuard>,
}

/// A configured, ready-to-run plugin.
pub struct PluginInstance {
    descriptor: PluginDescriptor,
    resolved_options: Options,
    reporter: Reporter,
    behavior: Behavior,
    subscription: Option<Subscription>,
}

impl PluginInstance {
    pub(crate) fn new(
        descriptor: PluginDescriptor,
        resolved_options: Options,
        reporter: Reporter,
        behavior: Behavior,
    ) -> Self {
        PluginInstance {
            descriptor,
            resolved_options,
            reporter,
            behavior,
            subscription: None,
        }
    }

    pub fn descriptor(&self) -> &PluginDescriptor {
        &self.descriptor
    }

    pub fn plugin_id(&self) -> &str {
        &self.descriptor.plugin_id
    }

    pub fn kind(&self) -> PluginKind {
        self.descriptor.kind
    }

    pub fn resolved_options(&self) -> &Options {
        &self.resolved_options
    }

    pub fn reporter(&self) -> &Reporter {
        &self.reporter
    }

    /// Take one reading without emitting it.
    pub fn poll(&mut self, now_ms: i64) -> Result<Vec<Emission>, PluginError> {
        match &mut self.behavior {
            Behavior::Polling(src) => Ok(src.poll(now_ms)),
            Behavior::Event(_) => Err(PluginError::WrongKind {
                plugin_id: self.descriptor.plugin_id.clone(),
                expected: PluginKind::Polling,
            }),
        }
    }

    /// Poll and emit every reading through the reporter. Returns how many
    /// records were stored.
    pub fn poll_and_report(&mut self, now_ms: i64) -> Result<usize, PollFailure> {
        let emissions = self.poll(now_ms).map_err(PollFailure::Plugin)?;
        let mut stored = 0;
        for e in emissions {
            if self
                .reporter
                .emit(e)
                .map_err(PollFailure::Report)?
                .is_some()
            {
                stored += 1;
            }
        }
        Ok(stored)
    }

    pub fn is_subscribed(&self) -> bool {
        self.subscription.is_some()
    }

    /// Route matching bus events to this plugin. Subscribing twice is a no-op.
    pub fn subscribe(&mut self, bus: &Arc<EventBus>) -> Result<(), PluginError> {
        let Behavior::Event(source) = &self.behavior else {
            return Err(PluginError::WrongKind {
                plugin_id: self.descriptor.plugin_id.clone(),
                expected: PluginKind::Event,
            });
        };
        if self.subscription.is_some() {
            return Ok(());
        }
        let topic = source.lock().unwrap().topic();
        let cb_source = source.clone();
        let reporter = self.reporter.clone();
        let id = bus.subscribe(topic, move |event| {
            let emission = {
                let mut src = cb_source.lock().unwrap();
                if !src.matches(event) {
                    return;
                }
                src.on_event(event)
            };
            if let Some(e) = emission {
                if let Err(err) = reporter.emit(e) {
                    tracing::warn!(plugin = ?reporter.plugin_id(), %err, "event emission failed");
                }
            }
        });
        let feed = match source.lock().unwrap().start_feed(bus) {
            Ok(f) => f,
            Err(e) => {
                bus.unsubscribe(id);
                return Err(e);
            }
        };
        self.subscription = Some(Subscription {
            bus: bus.clone(),
            id,
            _feed: feed,
        });
        Ok(())
    }

    pub fn unsubscribe(&mut self) {
        if let Some(sub) = self.subscription.take() {
            sub.bus.unsubscribe(sub.id);
        }
    }
}

impl Drop for PluginInstance {
    fn drop(&mut self) {
        self.unsubscribe();
    }
}

impl std::fmt::Debug for PluginInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginInstance")
            .field("plugin_id", &self.descriptor.plugin_id)
            .field("options", &self.resolved_options)
            .field("subscribed", &self.subscription.is_some())
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PollFailure {
    #[error(transparent)]
    Plugin(PluginError),
    #[error(transparent)]
    Report(ReportError),
}

/// Payload used when a host counter cannot be read.
pub fn source_unavailable(detail: impl std::fmt::Display) -> Emission {
    Emission::Structured(Value::Object(
        [
            ("error".to_string(), Value::from("source_unavailable")),
            ("detail".to_string(), Value::from(detail.to_string())),
        ]
        .into_iter()
        .collect(),
    ))
}
