//! Loading session logs for analysis and rendering the results.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::mesh::store::{self, CorruptRecord, StoreError};
use pilotkit_core::profile::{Bin, Profile, ProfileError, StateDuration, Utilization};
use pilotkit_core::EntityKind;

/// Bin width used when none is given, in seconds.
pub const DEFAULT_RESOLUTION: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ProfilingError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A profile plus the log lines that had to be skipped to build it.
#[derive(Debug, Clone)]
pub struct LoadedProfile {
    pub profile: Profile,
    pub corrupt: Vec<CorruptRecord>,
}

/// Reads a session's event log. Lines that do not parse are skipped and
/// returned in `corrupt`.
pub fn load_session(dir: &Path) -> Result<LoadedProfile, ProfilingError> {
    let replay = store::replay_events(dir)?;
    let events = replay.records.into_iter().map(|(_, e)| e).collect();
    Ok(LoadedProfile {
        profile: Profile::load(events)?,
        corrupt: replay.corrupt,
    })
}

pub fn write_bins_csv(out: &mut impl Write, header: &str, bins: &[Bin]) -> io::Result<()> {
    writeln!(out, "time,{header}")?;
    for b in bins {
        writeln!(out, "{:.3},{}", b.start, b.value)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DurationsReport {
    pub entity: String,
    pub states: Vec<StateDuration>,
    /// Per state name, summed over repeated visits.
    pub totals: BTreeMap<String, f64>,
}

pub fn durations_report(profile: &Profile, entity: &str) -> Result<DurationsReport, ProfileError> {
    let states = profile.durations(entity)?;
    let mut totals = BTreeMap::new();
    for s in &states {
        if let Some(d) = s.duration {
            *totals.entry(s.state.clone()).or_insert(0.0) += d;
        }
    }
    Ok(DurationsReport {
        entity: entity.into(),
        states,
        totals,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PilotSummary {
    pub final_state: String,
    /// Absent when the pilot never became ACTIVE.
    pub utilization: Option<Utilization>,
    pub peak_executing_cores: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub span_secs: f64,
    pub events: usize,
    /// Entity counts per final state, by kind.
    pub final_states: BTreeMap<String, BTreeMap<String, usize>>,
    pub peak_executing_units: u64,
    pub pilots: BTreeMap<String, PilotSummary>,
}

fn peak(bins: &[Bin]) -> u64 {
    bins.iter().map(|b| b.value).max().unwrap_or(0)
}

pub fn summary(profile: &Profile, resolution: f64) -> Result<Summary, ProfileError> {
    let mut final_states = BTreeMap::new();
    for kind in EntityKind::ALL {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in profile.final_states(kind).into_values() {
            *counts.entry(s).or_default() += 1;
        }
        if !counts.is_empty() {
            final_states.insert(kind.name().to_string(), counts);
        }
    }
    let mut pilots = BTreeMap::new();
    for (id, state) in profile.final_states(EntityKind::Pilot) {
        let utilization = match profile.utilization(&id) {
            Ok(u) => Some(u),
            Err(ProfileError::NeverActive(_)) | Err(ProfileError::MissingCores(_)) => None,
            Err(e) => return Err(e),
        };
        let cores = profile.core_concurrency("EXECUTING", Some(&id), resolution)?;
        pilots.insert(
            id,
            PilotSummary {
                final_state: state,
                utilization,
                peak_executing_cores: peak(&cores),
            },
        );
    }
    Ok(Summary {
        span_secs: profile.span(),
        events: profile.events().len(),
        final_states,
        peak_executing_units: peak(&profile.concurrency(EntityKind::Unit, "EXECUTING", resolution)?),
        pilots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        let bins = [Bin { start: 0.0, value: 2 }, Bin { start: 0.1, value: 0 }];
        write_bins_csv(&mut out, "EXECUTING", &bins).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "time,EXECUTING\n0.000,2\n0.100,0\n");
    }
}
