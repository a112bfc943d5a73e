//! Allocation-only core of the pilotkit runtime.
//!
//! Everything in this crate is a pure function of its inputs: entity state
//! machines, unit description validation, first-fit slot allocation, launch
//! command rendering, the simulated batch queue, client-side pilot selection,
//! ensemble workflow state and postmortem profiling. IO, threads, processes and
//! the command line live in the `pilotkit` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod batch;
pub mod event;
pub mod launch;
pub mod model;
pub mod placement;
pub mod profile;
pub mod slots;
pub mod state;
pub mod workflow;

pub use event::{EntityKind, Event, Timestamp};
pub use model::{
    validate_unit_description, Pilot, PilotDescription, StagingDirective, StagingMode, Unit, UnitDescription,
    ValidationError,
};
pub use state::{transition, IllegalTransition, PilotState, StateMachine, UnitState};
