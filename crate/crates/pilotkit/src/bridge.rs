//! Messages carried by the persistent client/agent bridge, and the agent's
//! bootstrap configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pilotkit_core::launch::ResourceConfig;
use pilotkit_core::{Event, Timestamp, Unit, UnitState};
use serde::{Deserialize, Serialize};

/// Client to agent, appended to `bridge/inbox.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InboxMsg {
    Units { pilot: String, units: Vec<Unit> },
    Shutdown { pilot: String },
}

impl InboxMsg {
    pub fn pilot(&self) -> &str {
        match self {
            InboxMsg::Units { pilot, .. } | InboxMsg::Shutdown { pilot } => pilot,
        }
    }
}

/// A unit state change observed by an agent component. The client applies it
/// only if the unit is still in `from`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitUpdate {
    pub pilot: String,
    pub unit_id: String,
    pub from: UnitState,
    pub to: UnitState,
    pub timestamp: Timestamp,
    pub component: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

/// Agent to client, appended to `bridge/outbox.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutboxMsg {
    Unit(UnitUpdate),
    /// A non-state record to be persisted verbatim.
    Record {
        pilot: String,
        event: Event,
    },
}

fn default_poll_ms() -> u64 {
    10
}

fn one() -> usize {
    1
}

pub fn default_executors() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Everything an agent needs; passed as a JSON file to `pilotkit-agent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub session_dir: PathBuf,
    pub pilot_id: String,
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    /// Walltime; the agent cancels remaining work when it expires.
    pub runtime_secs: f64,
    pub resource: ResourceConfig,
    #[serde(default = "default_executors")]
    pub executors: usize,
    #[serde(default = "one")]
    pub stagers: usize,
    #[serde(default = "default_poll_ms")]
    pub poll_ms: u64,
    /// Relative output staging destinations resolve against this directory.
    pub output_root: PathBuf,
}

impl AgentConfig {
    pub fn pilot_dir(&self) -> PathBuf {
        pilot_dir(&self.session_dir, &self.pilot_id)
    }
}

pub fn pilot_dir(session_dir: &Path, pilot_id: &str) -> PathBuf {
    session_dir.join(pilot_id)
}

pub fn unit_sandbox(session_dir: &Path, pilot_id: &str, unit_id: &str) -> PathBuf {
    pilot_dir(session_dir, pilot_id).join(unit_id)
}

/// Per-pilot area holding one physical copy of each LINK-staged source.
pub fn shared_dir(session_dir: &Path, pilot_id: &str) -> PathBuf {
    pilot_dir(session_dir, pilot_id).join("shared")
}

/// Where the client places COPY and MOVE sources inside a unit sandbox.
pub const STAGED_DIR: &str = ".staged";

#[cfg(test)]
mod tests {
    use super::*;
    use pilotkit_core::EntityKind;

    #[test]
    fn messages_round_trip() {
        let m = OutboxMsg::Unit(UnitUpdate {
            pilot: "pilot.0000".into(),
            unit_id: "unit.000001".into(),
            from: UnitState::AgentScheduling,
            to: UnitState::Executing,
            timestamp: Timestamp::from_mono(5),
            component: "executor.0".into(),
            payload: BTreeMap::from([("cores".to_string(), "24".to_string())]),
        });
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.starts_with(r#"{"type":"unit","pilot":"pilot.0000""#));
        assert_eq!(serde_json::from_str::<OutboxMsg>(&s).unwrap(), m);
        let r = OutboxMsg::Record {
            pilot: "p".into(),
            event: Event::new(
                Timestamp::from_mono(1),
                EntityKind::Component,
                "p.scheduler",
                "scheduler_stats",
                "agent",
            ),
        };
        assert_eq!(
            serde_json::from_str::<OutboxMsg>(&serde_json::to_string(&r).unwrap()).unwrap(),
            r
        );
        let i = InboxMsg::Shutdown { pilot: "p".into() };
        assert_eq!(serde_json::to_string(&i).unwrap(), r#"{"type":"shutdown","pilot":"p"}"#);
    }
}
