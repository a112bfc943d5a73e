//! Entity state machines.
//!
//! Pilots, units, tasks and stages move strictly forward through their listed
//! states, one step at a time, and may jump to a failure (or cancel) state from
//! any non-terminal state. Pipelines are the exception: suspend and resume form
//! a cycle between `RUNNING` and `SUSPENDED`.

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::event::EntityKind;

/// A finite state machine over a closed set of states.
pub trait StateMachine: Copy + Eq + fmt::Debug + 'static {
    /// Every state, in declaration order.
    const ALL: &'static [Self];

    fn name(self) -> &'static str;

    fn is_terminal(self) -> bool;

    /// Whether `self -> to` is an edge of the machine.
    fn allows(self, to: Self) -> bool;

    fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition {from:?} -> {to:?}")]
pub struct IllegalTransition<S: StateMachine> {
    pub from: S,
    pub to: S,
}

/// Returns `to` when `from -> to` is an edge of `S`.
///
/// The caller owns the entity and must emit exactly one event on success.
pub fn transition<S: StateMachine>(from: S, to: S) -> Result<S, IllegalTransition<S>> {
    if from.allows(to) {
        Ok(to)
    } else {
        Err(IllegalTransition { from, to })
    }
}

macro_rules! linear_machine {
    (
        $(#[$meta:meta])*
        $name:ident {
            forward: [$($fwd:ident => $fwd_name:literal),+ $(,)?],
            success: $ok:ident => $ok_name:literal,
            escape: [$($esc:ident => $esc_name:literal),+ $(,)?] $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $fwd_name)] $fwd,)+
            #[serde(rename = $ok_name)] $ok,
            $(#[serde(rename = $esc_name)] $esc,)+
        }

        impl $name {
            const FORWARD: &'static [$name] = &[$($name::$fwd,)+ $name::$ok];

            /// Position along the forward path; escape states sort after it.
            pub fn ordinal(self) -> usize {
                Self::ALL.iter().position(|s| *s == self).unwrap_or(usize::MAX)
            }
        }

        impl StateMachine for $name {
            const ALL: &'static [$name] = &[$($name::$fwd,)+ $name::$ok, $($name::$esc,)+];

            fn name(self) -> &'static str {
                match self {
                    $($name::$fwd => $fwd_name,)+
                    $name::$ok => $ok_name,
                    $($name::$esc => $esc_name,)+
                }
            }

            fn is_terminal(self) -> bool {
                matches!(self, $name::$ok $(| $name::$esc)+)
            }

            fn allows(self, to: Self) -> bool {
                if self.is_terminal() {
                    return false;
                }
                if matches!(to, $($name::$esc)|+) {
                    return true;
                }
                let fwd = Self::FORWARD;
                match fwd.iter().position(|s| *s == self) {
                    Some(i) => fwd.get(i + 1) == Some(&to),
                    None => false,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

linear_machine! {
    /// Lifecycle of a pilot: request, batch submission, queue wait, active agent.
    PilotState {
        forward: [
            New => "NEW",
            Launching => "LAUNCHING",
            Queued => "QUEUED",
            Active => "ACTIVE",
        ],
        success: Done => "DONE",
        escape: [Failed => "FAILED", Canceled => "CANCELED"],
    }
}

linear_machine! {
    /// Lifecycle of a unit, one state per component it traverses.
    UnitState {
        forward: [
            New => "NEW",
            UmgrScheduling => "UMGR_SCHEDULING",
            UmgrStagingInput => "UMGR_STAGING_INPUT",
            AgentStagingInput => "AGENT_STAGING_INPUT",
            AgentScheduling => "AGENT_SCHEDULING",
            Executing => "EXECUTING",
            AgentStagingOutput => "AGENT_STAGING_OUTPUT",
        ],
        success: Done => "DONE",
        escape: [Failed => "FAILED", Canceled => "CANCELED"],
    }
}

linear_machine! {
    /// Lifecycle of an ensemble task.
    TaskState {
        forward: [
            Specified => "SPECIFIED",
            Scheduled => "SCHEDULED",
            Submitted => "SUBMITTED",
            Executed => "EXECUTED",
        ],
        success: Done => "DONE",
        escape: [Failed => "FAILED"],
    }
}

linear_machine! {
    /// Lifecycle of a stage within a pipeline.
    StageState {
        forward: [
            Described => "DESCRIBED",
            Scheduled => "SCHEDULED",
        ],
        success: Done => "DONE",
        escape: [Failed => "FAILED", Canceled => "CANCELED"],
    }
}

impl UnitState {
    /// Terminal outcome of a unit as seen by a task.
    pub fn is_success(self) -> bool {
        self == UnitState::Done
    }
}

/// Control state of a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineState {
    Running,
    Suspended,
    Done,
    Stopped,
}

impl StateMachine for PipelineState {
    const ALL: &'static [PipelineState] = &[
        PipelineState::Running,
        PipelineState::Suspended,
        PipelineState::Done,
        PipelineState::Stopped,
    ];

    fn name(self) -> &'static str {
        match self {
            PipelineState::Running => "RUNNING",
            PipelineState::Suspended => "SUSPENDED",
            PipelineState::Done => "DONE",
            PipelineState::Stopped => "STOPPED",
        }
    }

    fn is_terminal(self) -> bool {
        matches!(self, PipelineState::Done | PipelineState::Stopped)
    }

    fn allows(self, to: Self) -> bool {
        use PipelineState::*;
        matches!(
            (self, to),
            (Running, Suspended)
                | (Suspended, Running)
                | (Running, Done)
                | (Suspended, Done)
                | (Running, Stopped)
                | (Suspended, Stopped)
        )
    }
}

impl fmt::Display for PipelineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies one of the state machines by name, for code that handles
/// events generically (profiling, status).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Machine {
    Pilot,
    Unit,
    Task,
    Stage,
    Pipeline,
}

impl Machine {
    pub fn for_kind(kind: EntityKind) -> Option<Machine> {
        match kind {
            EntityKind::Pilot => Some(Machine::Pilot),
            EntityKind::Unit => Some(Machine::Unit),
            EntityKind::Task => Some(Machine::Task),
            EntityKind::Stage => Some(Machine::Stage),
            EntityKind::Pipeline => Some(Machine::Pipeline),
            EntityKind::Component => None,
        }
    }

    /// Whether `name` is a state of this machine.
    pub fn has_state(self, name: &str) -> bool {
        match self {
            Machine::Pilot => PilotState::parse(name).is_some(),
            Machine::Unit => UnitState::parse(name).is_some(),
            Machine::Task => TaskState::parse(name).is_some(),
            Machine::Stage => StageState::parse(name).is_some(),
            Machine::Pipeline => PipelineState::parse(name).is_some(),
        }
    }

    /// Edge check by state name. Unknown names are never legal.
    pub fn allows(self, from: &str, to: &str) -> bool {
        fn check<S: StateMachine>(from: &str, to: &str) -> bool {
            match (S::parse(from), S::parse(to)) {
                (Some(a), Some(b)) => a.allows(b),
                _ => false,
            }
        }
        match self {
            Machine::Pilot => check::<PilotState>(from, to),
            Machine::Unit => check::<UnitState>(from, to),
            Machine::Task => check::<TaskState>(from, to),
            Machine::Stage => check::<StageState>(from, to),
            Machine::Pipeline => check::<PipelineState>(from, to),
        }
    }

    pub fn is_terminal(self, name: &str) -> bool {
        fn check<S: StateMachine>(name: &str) -> bool {
            S::parse(name).map(StateMachine::is_terminal).unwrap_or(false)
        }
        match self {
            Machine::Pilot => check::<PilotState>(name),
            Machine::Unit => check::<UnitState>(name),
            Machine::Task => check::<TaskState>(name),
            Machine::Stage => check::<StageState>(name),
            Machine::Pipeline => check::<PipelineState>(name),
        }
    }
}
