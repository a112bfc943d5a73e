//! Timestamped state-transition records.

use alloc::collections::BTreeMap;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Monotonic nanoseconds for ordering and durations, wall-clock seconds for display.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct Timestamp {
    pub mono_ns: u64,
    pub wall: f64,
}

impl Timestamp {
    pub const fn from_mono(mono_ns: u64) -> Self {
        Timestamp { mono_ns, wall: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityKind {
    Pilot,
    Unit,
    Task,
    Stage,
    Pipeline,
    Component,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Pilot,
        EntityKind::Unit,
        EntityKind::Task,
        EntityKind::Stage,
        EntityKind::Pipeline,
        EntityKind::Component,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Pilot => "PILOT",
            EntityKind::Unit => "UNIT",
            EntityKind::Task => "TASK",
            EntityKind::Stage => "STAGE",
            EntityKind::Pipeline => "PIPELINE",
            EntityKind::Component => "COMPONENT",
        }
    }

    pub fn parse(s: &str) -> Option<EntityKind> {
        EntityKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of the session event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: Timestamp,
    pub entity_kind: EntityKind,
    pub entity_id: String,
    /// Name of the state entered, or a free-form name for non-state records.
    pub event_name: String,
    pub component: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl Event {
    pub fn new(
        timestamp: Timestamp,
        entity_kind: EntityKind,
        entity_id: impl Into<String>,
        event_name: impl Into<String>,
        component: impl Into<String>,
    ) -> Self {
        Event {
            timestamp,
            entity_kind,
            entity_id: entity_id.into(),
            event_name: event_name.into(),
            component: component.into(),
            payload: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.payload.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }
}
