use std::sync::{Arc, Mutex};

use crate::plugin_kit::bus::{BusEvent, EventTopic};
use crate::plugin_kit::instance::EventSource;
use crate::plugin_kit::reporter::Emission;

/// Logs activity transitions. The transitions themselves are published by
/// the scheduler from its activity signal (see `scheduler::ActivityTrace`).
pub(super) struct ActivityState;

impl ActivityState {
    pub(super) fn shared() -> Arc<Mutex<Box<dyn EventSource>>> {
        Arc::new(Mutex::new(Box::new(ActivityState)))
    }
}

impl EventSource for ActivityState {
    fn topic(&self) -> EventTopic {
        EventTopic::Activity
    }

    fn on_event(&mut self, event: &BusEvent) -> Option<Emission> {
        Some(Emission::Structured(event.data.clone()))
    }
}
