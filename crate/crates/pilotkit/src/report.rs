//! `report.json`: the final per-entity states of one `pilotkit run`.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::workload::Mode;
use pilotkit_core::profile::Profile;
use pilotkit_core::EntityKind;

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub mode: Mode,
    pub session_id: String,
    pub session_dir: PathBuf,
    pub resource: String,
    /// Wall-clock start, seconds since the Unix epoch.
    pub started_at: f64,
    pub wall_time_secs: f64,
    pub pilots: BTreeMap<String, String>,
    pub units: BTreeMap<String, UnitEntry>,
    pub tasks: BTreeMap<String, String>,
    pub stages: BTreeMap<String, String>,
    pub pipelines: BTreeMap<String, String>,
    /// Entity counts per final state, by kind.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run facts that are not in the event log.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub mode: Mode,
    pub session_id: String,
    pub session_dir: PathBuf,
    pub resource: String,
    pub started_at: f64,
    pub wall_time_secs: f64,
}

fn failed(kind: EntityKind, state: &str) -> bool {
    match kind {
        EntityKind::Unit => matches!(state, "FAILED" | "CANCELED"),
        EntityKind::Task => state == "FAILED",
        EntityKind::Pipeline => matches!(state, "FAILED" | "STOPPED" | "CANCELED"),
        _ => false,
    }
}

impl Report {
    pub fn from_profile(info: RunInfo, profile: &Profile) -> Report {
        let mut units: BTreeMap<String, UnitEntry> = profile
            .final_states(EntityKind::Unit)
            .into_iter()
            .map(|(id, state)| {
                (
                    id,
                    UnitEntry {
                        state,
                        ..Default::default()
                    },
                )
            })
            .collect();
        for e in profile.events() {
            if e.entity_kind != EntityKind::Unit {
                continue;
            }
            let Some(u) = units.get_mut(&e.entity_id) else { continue };
            if let Some(p) = e.payload.get("pilot") {
                u.pilot = Some(p.clone());
            }
            if let Some(c) = e.payload.get("exit_code").and_then(|c| c.parse().ok()) {
                u.exit_code = Some(c);
            }
        }
        let mut counts = BTreeMap::new();
        let mut success = true;
        for kind in [
            EntityKind::Pilot,
            EntityKind::Unit,
            EntityKind::Task,
            EntityKind::Stage,
            EntityKind::Pipeline,
        ] {
            let mut c: BTreeMap<String, usize> = BTreeMap::new();
            for s in profile.final_states(kind).into_values() {
                success &= !failed(kind, &s);
                *c.entry(s).or_default() += 1;
            }
            if !c.is_empty() {
                counts.insert(kind.name().to_string(), c);
            }
        }
        Report {
            schema_version: SCHEMA_VERSION,
            mode: info.mode,
            session_id: info.session_id,
            session_dir: info.session_dir,
            resource: info.resource,
            started_at: info.started_at,
            wall_time_secs: info.wall_time_secs,
            pilots: profile.final_states(EntityKind::Pilot),
            units,
            tasks: profile.final_states(EntityKind::Task),
            stages: profile.final_states(EntityKind::Stage),
            pipelines: profile.final_states(EntityKind::Pipeline),
            counts,
            success,
            error: None,
        }
    }

    pub fn path(session_dir: &Path) -> PathBuf {
        session_dir.join(REPORT_FILE)
    }

    pub fn write(&self, session_dir: &Path) -> io::Result<PathBuf> {
        let path = Self::path(session_dir);
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> io::Result<Report> {
        let text = std::fs::read(path)?;
        serde_json::from_slice(&text).map_err(io::Error::other)
    }

    /// The report without timing and session identity, for comparing runs.
    pub fn normalized(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        let obj = v.as_object_mut().expect("report is an object");
        for key in ["session_id", "session_dir", "started_at", "wall_time_secs"] {
            obj.remove(key);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pilotkit_core::{Event, Timestamp};

    fn ev(ns: u64, kind: EntityKind, id: &str, name: &str, payload: &[(&str, &str)]) -> Event {
        let mut e = Event::new(Timestamp { mono_ns: ns, wall: 0.0 }, kind, id, name, "test");
        for (k, v) in payload {
            e.payload.insert(k.to_string(), v.to_string());
        }
        e
    }

    fn info() -> RunInfo {
        RunInfo {
            mode: Mode::Units,
            session_id: "s".into(),
            session_dir: "/tmp/s".into(),
            resource: "local".into(),
            started_at: 1.0,
            wall_time_secs: 2.0,
        }
    }

    #[test]
    fn failed_unit_marks_report_unsuccessful() {
        let p = Profile::load(vec![
            ev(1, EntityKind::Unit, "unit.000000", "NEW", &[]),
            ev(2, EntityKind::Unit, "unit.000000", "UMGR_SCHEDULING", &[]),
            ev(
                3,
                EntityKind::Unit,
                "unit.000000",
                "UMGR_STAGING_INPUT",
                &[("pilot", "pilot.0000")],
            ),
            ev(4, EntityKind::Unit, "unit.000000", "FAILED", &[("exit_code", "3")]),
        ])
        .unwrap();
        let r = Report::from_profile(info(), &p);
        assert!(!r.success);
        let u = &r.units["unit.000000"];
        assert_eq!(
            (u.state.as_str(), u.exit_code, u.pilot.as_deref()),
            ("FAILED", Some(3), Some("pilot.0000"))
        );
        assert_eq!(r.counts["UNIT"]["FAILED"], 1);
    }

    #[test]
    fn normalized_drops_identity_and_timing() {
        let r = Report::from_profile(info(), &Profile::load(Vec::new()).unwrap());
        assert!(r.success);
        let mut other = r.clone();
        other.session_id = "t".into();
        other.wall_time_secs = 9.0;
        assert_eq!(r.normalized(), other.normalized());
        assert!(r.normalized().get("started_at").is_none());
    }
}
