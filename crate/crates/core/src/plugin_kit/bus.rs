use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventTopic {
    Filesystem,
    Clock,
    Activity,
}

/// A notification delivered to event plugins.
#[derive(Clone, Debug, PartialEq)]
pub struct BusEvent {
    pub topic: EventTopic,
    pub data: Value,
}

impl BusEvent {
    pub fn timezone_changed(old_zone: &str, new_zone: &str) -> Self {
        BusEvent {
            topic: EventTopic::Clock,
            data: json!({"event": "timezone_changed", "old_zone": old_zone, "new_zone": new_zone}),
        }
    }

    pub fn clock_jump(delta_ms: i64) -> Self {
        BusEvent {
            topic: EventTopic::Clock,
            data: json!({"event": "time_jump", "delta_ms": delta_ms}),
        }
    }

    pub fn filesystem(kind: &str, path: &str) -> Self {
        BusEvent {
            topic: EventTopic::Filesystem,
            data: json!({"kind": kind, "path": path}),
        }
    }

    pub fn activity(active: bool) -> Self {
        BusEvent {
            topic: EventTopic::Activity,
            data: json!({"state": if active { "active" } else { "idle" }}),
        }
    }
}

pub type SubscriptionId = u64;

type Callback = Arc<dyn Fn(&BusEvent) + Send + Sync>;

/// Synchronous publish/subscribe hub. Callbacks run on the publisher's thread.
#[derive(Default)]
pub struct EventBus {
    next_id: AtomicU64,
    subscribers: Mutex<Vec<(SubscriptionId, EventTopic, Callback)>>,
}

impl EventBus {
    pub fn new() -> Arc<Self> {
        Arc::new(EventBus::default())
    }

    pub fn subscribe(
        &self,
        topic: EventTopic,
        callback: impl Fn(&BusEvent) + Send + Sync + 'static,
    ) -> SubscriptionId {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.subscribers
            .lock()
            .unwrap()
            .push((id, topic, Arc::new(callback)));
        id
    }

    pub fn unsubscribe(&self, id: SubscriptionId) {
        self.subscribers
            .lock()
            .unwrap()
            .retain(|(s, _, _)| *s != id);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().unwrap().len()
    }

    /// Deliver `event` to every matching subscriber; returns how many saw it.
    pub fn publish(&self, event: &BusEvent) -> usize {
        let targets: Vec<Callback> = self
            .subscribers
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, topic, _)| *topic == event.topic)
            .map(|(_, _, cb)| cb.clone())
            .collect();
        for cb in &targets {
            cb(event);
        }
        targets.len()
    }
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventBus")
            .field("subscribers", &self.subscriber_count())
            .finish()
    }
}
