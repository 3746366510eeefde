use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use notify::{EventKind, RecursiveMode, Watcher};

use crate::model::Options;
use crate::plugin_kit::bus::{BusEvent, EventBus, EventTopic};
use crate::plugin_kit::instance::{EventSource, FeedGuard};
use crate::plugin_kit::reporter::Emission;
use crate::plugin_kit::PluginError;

pub(super) struct FsEvents {
    root: PathBuf,
    recursive: bool,
}

impl FsEvents {
    pub(super) fn from_options(o: &Options) -> Arc<Mutex<Box<dyn EventSource>>> {
        let root = PathBuf::from(o["path"].as_text().unwrap_or("."));
        let root = std::fs::canonicalize(&root).unwrap_or(root);
        Arc::new(Mutex::new(Box::new(FsEvents {
            root,
            recursive: o["recursive"].as_bool().unwrap_or(false),
        })))
    }
}

fn kind_label(kind: &EventKind) -> Option<&'static str> {
    match kind {
        EventKind::Create(_) => Some("create"),
        EventKind::Modify(_) => Some("modify"),
        EventKind::Remove(_) => Some("remove"),
        _ => None,
    }
}

impl EventSource for FsEvents {
    fn topic(&self) -> EventTopic {
        EventTopic::Filesystem
    }

    fn matches(&self, event: &BusEvent) -> bool {
        let Some(path) = event.data.get("path").and_then(|p| p.as_str()) else {
            return false;
        };
        let path = Path::new(path);
        if self.recursive {
            path.starts_with(&self.root)
        } else {
            path.parent() == Some(self.root.as_path()) || path == self.root
        }
    }

    fn on_event(&mut self, event: &BusEvent) -> Option<Emission> {
        Some(Emission::Structured(event.data.clone()))
    }

    fn start_feed(&mut self, bus: &Arc<EventBus>) -> Result<Option<FeedGuard>, PluginError> {
        let bus = bus.clone();
        let mut watcher = notify::recommended_watcher(move |res: notify::Result<notify::Event>| {
            let Ok(ev) = res else { return };
            let Some(label) = kind_label(&ev.kind) else {
                return;
            };
            for p in &ev.paths {
                bus.publish(&BusEvent::filesystem(label, &p.to_string_lossy()));
            }
        })
        .map_err(|e| source_err(e.to_string()))?;
        let mode = if self.recursive {
            RecursiveMode::Recursive
        } else {
            RecursiveMode::NonRecursive
        };
        watcher
            .watch(&self.root, mode)
            .map_err(|e| source_err(format!("{}: {e}", self.root.display())))?;
        Ok(Some(Box::new(watcher)))
    }
}

fn source_err(reason: String) -> PluginError {
    PluginError::Source {
        plugin_id: "fs_events".into(),
        reason,
    }
}
