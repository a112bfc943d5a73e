//! Client-side late binding: choosing a pilot for a unit.
//!
//! Eligibility uses each pilot's declared capacity, never live slot occupancy,
//! and only ACTIVE pilots are ever chosen.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::state::{PilotState, StateMachine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedulingPolicy {
    /// Cycle over eligible pilots in attachment order.
    #[default]
    RoundRobin,
    /// Prefer the pilot with the most declared capacity not yet claimed by
    /// outstanding units; ties go to the earlier attachment.
    Backfill,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Candidate {
    id: String,
    cores: u32,
    gpus: u32,
    state: PilotState,
    outstanding_cores: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Assign(String),
    /// Some attached pilot could take the unit once it is ACTIVE.
    Wait,
    /// No live attached pilot is large enough.
    Unschedulable,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("pilot {0} is already attached")]
pub struct DuplicateAttachment(pub String);

#[derive(Debug, Clone)]
pub struct UnitPlacer {
    policy: SchedulingPolicy,
    pilots: Vec<Candidate>,
    next: usize,
}

impl UnitPlacer {
    pub fn new(policy: SchedulingPolicy) -> Self {
        UnitPlacer {
            policy,
            pilots: Vec::new(),
            next: 0,
        }
    }

    pub fn policy(&self) -> SchedulingPolicy {
        self.policy
    }

    pub fn attach(&mut self, id: &str, cores: u32, gpus: u32, state: PilotState) -> Result<(), DuplicateAttachment> {
        if self.pilots.iter().any(|p| p.id == id) {
            return Err(DuplicateAttachment(id.into()));
        }
        self.pilots.push(Candidate {
            id: id.into(),
            cores,
            gpus,
            state,
            outstanding_cores: 0,
        });
        Ok(())
    }

    pub fn is_attached(&self, id: &str) -> bool {
        self.pilots.iter().any(|p| p.id == id)
    }

    pub fn set_state(&mut self, id: &str, state: PilotState) {
        if let Some(p) = self.pilots.iter_mut().find(|p| p.id == id) {
            p.state = state;
        }
    }

    pub fn attached(&self) -> usize {
        self.pilots.len()
    }

    /// Records capacity already claimed by a unit assigned elsewhere, as when
    /// a restarted scheduler rebuilds its view.
    pub fn claim(&mut self, id: &str, cores: u32) {
        if let Some(p) = self.pilots.iter_mut().find(|p| p.id == id) {
            p.outstanding_cores += cores as u64;
        }
    }

    /// Returns capacity claimed by a unit that left the pilot.
    pub fn release(&mut self, id: &str, cores: u32) {
        if let Some(p) = self.pilots.iter_mut().find(|p| p.id == id) {
            p.outstanding_cores = p.outstanding_cores.saturating_sub(cores as u64);
        }
    }

    pub fn decide(&mut self, cores: u32, gpus: u32) -> Decision {
        let fits = |p: &Candidate| p.cores >= cores && p.gpus >= gpus;
        if !self.pilots.iter().any(|p| fits(p) && !p.state.is_terminal()) {
            return Decision::Unschedulable;
        }
        let eligible = |p: &Candidate| fits(p) && p.state == PilotState::Active;
        let n = self.pilots.len();
        let chosen = match self.policy {
            SchedulingPolicy::RoundRobin => (0..n).map(|k| (self.next + k) % n).find(|&i| eligible(&self.pilots[i])),
            SchedulingPolicy::Backfill => {
                let mut best: Option<(usize, i64)> = None;
                for (i, p) in self.pilots.iter().enumerate() {
                    if !eligible(p) {
                        continue;
                    }
                    let free = p.cores as i64 - p.outstanding_cores as i64;
                    if best.is_none_or(|(_, f)| free > f) {
                        best = Some((i, free));
                    }
                }
                best.map(|(i, _)| i)
            }
        };
        match chosen {
            Some(i) => {
                self.next = (i + 1) % n;
                self.pilots[i].outstanding_cores += cores as u64;
                Decision::Assign(self.pilots[i].id.clone())
            }
            None => Decision::Wait,
        }
    }
}
