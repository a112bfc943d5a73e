//! Post-mortem analysis of a session's events.
//!
//! Times are reported in seconds relative to the earliest event. An entity's
//! stay in a state runs from its event for that state to its next event; the
//! final state of a still-live entity stays open until the last event of the
//! session.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::Serialize;

use crate::event::{EntityKind, Event};
use crate::state::Machine;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("{kind} {id}: unknown state {state}")]
    UnknownState {
        kind: EntityKind,
        id: String,
        state: String,
    },
    #[error("{kind} {id}: illegal transition {from} -> {to}")]
    IllegalTransition {
        kind: EntityKind,
        id: String,
        from: String,
        to: String,
    },
    #[error("no events for {0}")]
    UnknownEntity(String),
    #[error("{0} has a single event")]
    InsufficientHistory(String),
    #[error("pilot {0} never became ACTIVE")]
    NeverActive(String),
    #[error("pilot {0} has no core count")]
    MissingCores(String),
    #[error("resolution must be positive")]
    BadResolution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateDuration {
    pub state: String,
    /// Seconds since the session origin.
    pub entered: f64,
    /// `Some(0.0)` for a terminal state, `None` for a state still occupied.
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub start: f64,
    pub value: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Utilization {
    pub pilot_cores: u64,
    pub active_secs: f64,
    pub busy_core_secs: f64,
    pub fraction: f64,
}

/// An interval `[start, end)` in nanoseconds since origin, with a weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
    pub weight: u64,
}

fn secs(ns: u64) -> f64 {
    ns as f64 / 1e9
}

#[derive(Debug, Clone)]
pub struct Profile {
    events: Vec<Event>,
    origin_ns: u64,
    end_ns: u64,
    /// Event indices per entity, in time order.
    entities: BTreeMap<(EntityKind, String), Vec<usize>>,
}

impl Profile {
    /// Orders events by timestamp (stable) and checks each entity's path
    /// against its state machine.
    pub fn load(mut events: Vec<Event>) -> Result<Profile, ProfileError> {
        events.sort_by_key(|e| e.timestamp.mono_ns);
        let origin_ns = events.first().map(|e| e.timestamp.mono_ns).unwrap_or(0);
        let end_ns = events.last().map(|e| e.timestamp.mono_ns).unwrap_or(0) - origin_ns;
        let mut entities: BTreeMap<(EntityKind, String), Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            let Some(machine) = Machine::for_kind(e.entity_kind) else {
                continue;
            };
            if !machine.has_state(&e.event_name) {
                return Err(ProfileError::UnknownState {
                    kind: e.entity_kind,
                    id: e.entity_id.clone(),
                    state: e.event_name.clone(),
                });
            }
            let path = entities.entry((e.entity_kind, e.entity_id.clone())).or_default();
            if let Some(&prev) = path.last() {
                let from = &events[prev].event_name;
                if !machine.allows(from, &e.event_name) {
                    return Err(ProfileError::IllegalTransition {
                        kind: e.entity_kind,
                        id: e.entity_id.clone(),
                        from: from.clone(),
                        to: e.event_name.clone(),
                    });
                }
            }
            path.push(i);
        }
        Ok(Profile {
            events,
            origin_ns,
            end_ns,
            entities,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn origin_ns(&self) -> u64 {
        self.origin_ns
    }

    /// Seconds from the first to the last event.
    pub fn span(&self) -> f64 {
        secs(self.end_ns)
    }

    pub fn entity_ids(&self, kind: EntityKind) -> impl Iterator<Item = &str> {
        self.entities
            .keys()
            .filter(move |(k, _)| *k == kind)
            .map(|(_, id)| id.as_str())
    }

    /// Current (last recorded) state of every entity of `kind`.
    pub fn final_states(&self, kind: EntityKind) -> BTreeMap<String, String> {
        self.entities
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|((_, id), path)| (id.clone(), self.events[*path.last().unwrap()].event_name.clone()))
            .collect()
    }

    fn find(&self, id: &str) -> Option<(EntityKind, &[usize])> {
        self.entities
            .iter()
            .find(|((_, eid), _)| eid == id)
            .map(|((k, _), p)| (*k, p.as_slice()))
    }

    fn rel(&self, i: usize) -> u64 {
        self.events[i].timestamp.mono_ns - self.origin_ns
    }

    pub fn durations(&self, id: &str) -> Result<Vec<StateDuration>, ProfileError> {
        let (kind, path) = self.find(id).ok_or_else(|| ProfileError::UnknownEntity(id.into()))?;
        let machine = Machine::for_kind(kind).expect("only state entities are indexed");
        if path.len() < 2 {
            return Err(ProfileError::InsufficientHistory(id.into()));
        }
        Ok(path
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let e = &self.events[i];
                let duration = match path.get(k + 1) {
                    Some(&next) => Some(secs(self.rel(next) - self.rel(i))),
                    None if machine.is_terminal(&e.event_name) => Some(0.0),
                    None => None,
                };
                StateDuration {
                    state: e.event_name.clone(),
                    entered: secs(self.rel(i)),
                    duration,
                }
            })
            .collect())
    }

    /// Stays in `state` by entities of `kind`, weighted by `weight`.
    pub fn intervals(&self, kind: EntityKind, state: &str, weight: impl Fn(&Event) -> Option<u64>) -> Vec<Interval> {
        let mut out = Vec::new();
        for ((k, _), path) in &self.entities {
            if *k != kind {
                continue;
            }
            for (n, &i) in path.iter().enumerate() {
                let e = &self.events[i];
                if e.event_name != state {
                    continue;
                }
                let Some(w) = weight(e) else {
                    continue;
                };
                let start = self.rel(i);
                let end = path.get(n + 1).map(|&j| self.rel(j)).unwrap_or(self.end_ns);
                out.push(Interval { start, end, weight: w });
            }
        }
        out
    }

    /// Peak number of entities of `kind` in `state` within each bin.
    pub fn concurrency(&self, kind: EntityKind, state: &str, resolution: f64) -> Result<Vec<Bin>, ProfileError> {
        let iv = self.intervals(kind, state, |_| Some(1));
        binned_peaks(&iv, resolution, self.end_ns)
    }

    /// Like [`Profile::concurrency`] for units, summing the `cores` payload,
    /// optionally restricted to one pilot.
    pub fn core_concurrency(
        &self,
        state: &str,
        pilot: Option<&str>,
        resolution: f64,
    ) -> Result<Vec<Bin>, ProfileError> {
        let iv = self.intervals(EntityKind::Unit, state, |e| {
            if pilot.is_some_and(|p| e.get("pilot") != Some(p)) {
                return None;
            }
            Some(e.get("cores").and_then(|c| c.parse().ok()).unwrap_or(1))
        });
        binned_peaks(&iv, resolution, self.end_ns)
    }

    /// Core-seconds spent EXECUTING on `pilot` over its ACTIVE window.
    pub fn utilization(&self, pilot: &str) -> Result<Utilization, ProfileError> {
        let path = self
            .entities
            .get(&(EntityKind::Pilot, pilot.into()))
            .ok_or_else(|| ProfileError::UnknownEntity(pilot.into()))?;
        let pilot_cores: u64 = path
            .iter()
            .find_map(|&i| self.events[i].get("cores").and_then(|c| c.parse().ok()))
            .ok_or_else(|| ProfileError::MissingCores(pilot.into()))?;
        let k = path
            .iter()
            .position(|&i| self.events[i].event_name == "ACTIVE")
            .ok_or_else(|| ProfileError::NeverActive(pilot.into()))?;
        let active_start = self.rel(path[k]);
        let active_end = path.get(k + 1).map(|&j| self.rel(j)).unwrap_or(self.end_ns);
        let busy: u128 = self
            .intervals(EntityKind::Unit, "EXECUTING", |e| {
                if e.get("pilot") == Some(pilot) {
                    Some(e.get("cores").and_then(|c| c.parse().ok()).unwrap_or(1))
                } else {
                    None
                }
            })
            .iter()
            .map(|iv| {
                let s = iv.start.max(active_start);
                let e = iv.end.min(active_end);
                e.saturating_sub(s) as u128 * iv.weight as u128
            })
            .sum();
        let active_secs = secs(active_end - active_start);
        let busy_core_secs = busy as f64 / 1e9;
        let capacity = active_secs * pilot_cores as f64;
        Ok(Utilization {
            pilot_cores,
            active_secs,
            busy_core_secs,
            fraction: if capacity > 0.0 { busy_core_secs / capacity } else { 0.0 },
        })
    }
}

/// Maximum instantaneous weighted count of `intervals` within each bin of
/// width `resolution` seconds covering `[0, end_ns]`.
///
/// Zero-length intervals never count. At a shared instant, ends are applied
/// before starts, so back-to-back intervals do not overlap.
pub fn binned_peaks(intervals: &[Interval], resolution: f64, end_ns: u64) -> Result<Vec<Bin>, ProfileError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(ProfileError::BadResolution);
    }
    let width = ((resolution * 1e9 + 0.5) as u64).max(1);
    let nbins = (end_ns / width + 1) as usize;

    // (time, delta) with ends (negative) sorted first at equal times.
    let mut sweep: Vec<(u64, i64)> = Vec::with_capacity(intervals.len() * 2);
    for iv in intervals.iter().filter(|iv| iv.end > iv.start) {
        sweep.push((iv.start, iv.weight as i64));
        sweep.push((iv.end, -(iv.weight as i64)));
    }
    sweep.sort_by_key(|&(t, d)| (t, d));

    let mut bins: Vec<Bin> = (0..nbins)
        .map(|b| Bin {
            start: secs(b as u64 * width),
            value: 0,
        })
        .collect();
    let mut level: i64 = 0;
    let mut k = 0;
    for (b, bin) in bins.iter_mut().enumerate() {
        let lo = b as u64 * width;
        let hi = lo + width;
        // Apply everything at or before the bin start.
        while k < sweep.len() && sweep[k].0 <= lo {
            level += sweep[k].1;
            k += 1;
        }
        let mut peak = level;
        while k < sweep.len() && sweep[k].0 < hi {
            level += sweep[k].1;
            peak = peak.max(level);
            k += 1;
        }
        bin.value = peak.max(0) as u64;
    }
    Ok(bins)
}
