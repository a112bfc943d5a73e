//! Ensemble workflows: pipelines of stages of tasks, and the application state
//! that drives them.
//!
//! Every mutation of [`AppManagerState`] goes through [`AppManagerState::apply`]
//! with a [`JournalEntry`], so folding the journal from an empty state
//! reconstructs cursors and task states exactly.
//!
//! Rules enforced here:
//! - only the cursor stage of a RUNNING pipeline yields ready tasks;
//! - a stage completes when all its tasks are terminal; the cursor then moves
//!   on, unless a task failed under [`FailurePolicy::FailFast`], which stops
//!   the pipeline at that boundary;
//! - workflow mutations may only target work the cursor has not dispatched.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{basename, StagingDirective, StagingMode, UnitDescription};
use crate::state::{PipelineState, StageState, StateMachine, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProcessType {
    #[default]
    #[serde(rename = "NONE", alias = "none", alias = "null")]
    None,
    #[serde(rename = "PARALLEL", alias = "MPI", alias = "mpi", alias = "parallel")]
    Parallel,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuReqs {
    #[serde(default = "one")]
    pub processes: u32,
    #[serde(default)]
    pub process_type: ProcessType,
}

impl Default for CpuReqs {
    fn default() -> Self {
        CpuReqs {
            processes: 1,
            process_type: ProcessType::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GpuReqs {
    #[serde(default)]
    pub processes: u32,
    #[serde(default)]
    pub process_type: ProcessType,
}

fn specified() -> TaskState {
    TaskState::Specified
}

fn described() -> StageState {
    StageState::Described
}

fn running() -> PipelineState {
    PipelineState::Running
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub uid: String,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub pre_exec: Vec<String>,
    /// Files copied into the task sandbox; `"src > dest"` renames.
    #[serde(default)]
    pub copy_input_data: Vec<String>,
    #[serde(default)]
    pub cpu_reqs: CpuReqs,
    #[serde(default)]
    pub gpu_reqs: GpuReqs,
    #[serde(default = "specified")]
    pub state: TaskState,
}

impl Task {
    pub fn new(uid: impl Into<String>, executable: impl Into<String>) -> Self {
        Task {
            uid: uid.into(),
            executable: executable.into(),
            arguments: Vec::new(),
            pre_exec: Vec::new(),
            copy_input_data: Vec::new(),
            cpu_reqs: CpuReqs::default(),
            gpu_reqs: GpuReqs::default(),
            state: TaskState::Specified,
        }
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    fn check(&self) -> Result<(), WorkflowError> {
        let invalid = |reason: &str| WorkflowError::InvalidTask {
            uid: self.uid.clone(),
            reason: reason.into(),
        };
        if self.uid.is_empty() {
            return Err(invalid("empty uid"));
        }
        if self.executable.trim().is_empty() {
            return Err(invalid("empty executable"));
        }
        if self.cpu_reqs.processes < 1 {
            return Err(invalid("cpu_reqs.processes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub uid: String,
    pub tasks: Vec<Task>,
    #[serde(default = "described")]
    pub state: StageState,
}

impl Stage {
    pub fn new(uid: impl Into<String>, tasks: Vec<Task>) -> Self {
        Stage {
            uid: uid.into(),
            tasks,
            state: StageState::Described,
        }
    }

    fn all_terminal(&self) -> bool {
        self.tasks.iter().all(|t| t.state.is_terminal())
    }

    fn untouched(&self) -> bool {
        self.tasks.iter().all(|t| t.state == TaskState::Specified)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub uid: String,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub cursor: usize,
    #[serde(default = "running")]
    pub control: PipelineState,
}

impl Pipeline {
    pub fn new(uid: impl Into<String>, stages: Vec<Stage>) -> Self {
        Pipeline {
            uid: uid.into(),
            stages,
            cursor: 0,
            control: PipelineState::Running,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDesc {
    pub resource: String,
    /// Minutes.
    pub walltime: u32,
    pub cpus: u32,
    #[serde(default)]
    pub gpus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    FailFast,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Suspend,
    Resume,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    AddStages {
        pipeline: String,
        stages: Vec<Stage>,
    },
    AddTasks {
        pipeline: String,
        stage: String,
        tasks: Vec<Task>,
    },
    AddPipelines {
        pipelines: Vec<Pipeline>,
    },
}

/// One durable change of application state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    SetWorkflow {
        pipelines: Vec<Pipeline>,
        failure_policy: FailurePolicy,
    },
    Task {
        uid: String,
        state: TaskState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Control {
        pipeline: String,
        action: ControlAction,
    },
    Adapt {
        mutation: Mutation,
    },
}

/// A state change caused by applying a journal entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Change {
    Task {
        uid: String,
        state: TaskState,
    },
    Stage {
        pipeline: String,
        uid: String,
        state: StageState,
    },
    Pipeline {
        uid: String,
        state: PipelineState,
    },
    Cursor {
        pipeline: String,
        cursor: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkflowError {
    #[error("workflow has no pipelines")]
    EmptyWorkflow,
    #[error("pipeline {0} has no stages")]
    EmptyPipeline(String),
    #[error("stage {0} has no tasks")]
    EmptyStage(String),
    #[error("duplicate uid {0}")]
    DuplicateUid(String),
    #[error("invalid task {uid}: {reason}")]
    InvalidTask { uid: String, reason: String },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown pipeline {0}")]
    UnknownPipeline(String),
    #[error("unknown stage {0}")]
    UnknownStage(String),
    #[error("stale update for {uid}: already {current}")]
    StaleUpdate { uid: String, current: TaskState },
    #[error("illegal transition for {uid}: {from} -> {to}")]
    IllegalTransition {
        uid: String,
        from: TaskState,
        to: TaskState,
    },
    #[error("cannot {action:?} pipeline {pipeline} in state {state}")]
    InvalidControl {
        pipeline: String,
        state: PipelineState,
        action: ControlAction,
    },
    #[error("{0} has already been dispatched or completed")]
    ImmutablePast(String),
    #[error("journal does not start with a workflow")]
    NoWorkflow,
}

impl WorkflowError {
    /// Errors that only mean the update arrived late or twice.
    pub fn is_benign(&self) -> bool {
        matches!(
            self,
            WorkflowError::StaleUpdate { .. } | WorkflowError::IllegalTransition { .. }
        )
    }
}

fn collect_uids<'a>(
    pipelines: impl Iterator<Item = &'a Pipeline>,
    seen: &mut BTreeSet<String>,
) -> Result<(), WorkflowError> {
    for p in pipelines {
        if !seen.insert(format!("p:{}", p.uid)) {
            return Err(WorkflowError::DuplicateUid(p.uid.clone()));
        }
        collect_stage_uids(p.stages.iter(), seen)?;
    }
    Ok(())
}

fn collect_stage_uids<'a>(
    stages: impl Iterator<Item = &'a Stage>,
    seen: &mut BTreeSet<String>,
) -> Result<(), WorkflowError> {
    for s in stages {
        if !seen.insert(format!("s:{}", s.uid)) {
            return Err(WorkflowError::DuplicateUid(s.uid.clone()));
        }
        collect_task_uids(s.tasks.iter(), seen)?;
    }
    Ok(())
}

fn collect_task_uids<'a>(
    tasks: impl Iterator<Item = &'a Task>,
    seen: &mut BTreeSet<String>,
) -> Result<(), WorkflowError> {
    for t in tasks {
        if !seen.insert(format!("t:{}", t.uid)) {
            return Err(WorkflowError::DuplicateUid(t.uid.clone()));
        }
    }
    Ok(())
}

fn check_stages(stages: &[Stage]) -> Result<(), WorkflowError> {
    for s in stages {
        if s.tasks.is_empty() {
            return Err(WorkflowError::EmptyStage(s.uid.clone()));
        }
        for t in &s.tasks {
            t.check()?;
        }
    }
    Ok(())
}

fn check_pipelines(pipelines: &[Pipeline]) -> Result<(), WorkflowError> {
    for p in pipelines {
        if p.stages.is_empty() {
            return Err(WorkflowError::EmptyPipeline(p.uid.clone()));
        }
        check_stages(&p.stages)?;
    }
    Ok(())
}

/// Structural checks: non-empty pipelines and stages, valid tasks, unique uids
/// per entity kind across the whole workflow.
pub fn validate_workflow(pipelines: &[Pipeline]) -> Result<(), WorkflowError> {
    if pipelines.is_empty() {
        return Err(WorkflowError::EmptyWorkflow);
    }
    check_pipelines(pipelines)?;
    collect_uids(pipelines.iter(), &mut BTreeSet::new())
}

/// Resets runtime fields so a workflow description can be run afresh.
pub fn fresh_copy(pipelines: &[Pipeline]) -> Vec<Pipeline> {
    let mut out = pipelines.to_vec();
    for p in &mut out {
        p.cursor = 0;
        p.control = PipelineState::Running;
        for s in &mut p.stages {
            s.state = StageState::Described;
            for t in &mut s.tasks {
                t.state = TaskState::Specified;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TranslateError {
    #[error("task {uid}: unsupported requirement: {reason}")]
    UnsupportedRequirement { uid: String, reason: String },
}

fn input_directive(spec: &str) -> StagingDirective {
    match spec.split_once('>') {
        Some((src, dst)) => StagingDirective::new(src.trim(), dst.trim(), StagingMode::Copy),
        None => StagingDirective::new(spec.trim(), basename(spec.trim()), StagingMode::Copy),
    }
}

/// Maps a task onto the unit description the runtime executes.
///
/// The unit's `name` carries the task uid.
pub fn translate_task(task: &Task) -> Result<UnitDescription, TranslateError> {
    let unsupported = |reason: &str| TranslateError::UnsupportedRequirement {
        uid: task.uid.clone(),
        reason: reason.into(),
    };
    if task.gpu_reqs.process_type == ProcessType::Parallel && task.cpu_reqs.process_type != ProcessType::Parallel {
        return Err(unsupported("parallel gpu processes need parallel cpu processes"));
    }
    if task.cpu_reqs.processes < 1 {
        return Err(unsupported("cpu_reqs.processes must be at least 1"));
    }
    let mut unit = UnitDescription::new(task.executable.clone());
    unit.name = Some(task.uid.clone());
    unit.arguments = task.arguments.clone();
    unit.pre_exec = task.pre_exec.clone();
    unit.input_staging = task.copy_input_data.iter().map(|s| input_directive(s)).collect();
    unit.cores = task.cpu_reqs.processes;
    unit.gpus = task.gpu_reqs.processes;
    unit.mpi = task.cpu_reqs.process_type == ProcessType::Parallel;
    Ok(unit)
}

/// Global application state: the only mutable state of an ensemble run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppManagerState {
    pub pipelines: Vec<Pipeline>,
    pub failure_policy: FailurePolicy,
    /// Task uid to the unit most recently submitted for it.
    pub units: BTreeMap<String, String>,
}

impl AppManagerState {
    pub fn new(pipelines: Vec<Pipeline>, failure_policy: FailurePolicy) -> Result<Self, WorkflowError> {
        validate_workflow(&pipelines)?;
        Ok(AppManagerState {
            pipelines,
            failure_policy,
            units: BTreeMap::new(),
        })
    }

    /// Rebuilds state by folding a journal. Stale and late entries are
    /// skipped exactly as they were when first applied.
    pub fn replay<'a>(entries: impl IntoIterator<Item = &'a JournalEntry>) -> Result<Self, WorkflowError> {
        let mut entries = entries.into_iter();
        let mut state = match entries.next() {
            Some(JournalEntry::SetWorkflow {
                pipelines,
                failure_policy,
            }) => AppManagerState::new(pipelines.clone(), *failure_policy)?,
            _ => return Err(WorkflowError::NoWorkflow),
        };
        for e in entries {
            match state.apply(e) {
                Ok(_) => {}
                Err(err) if err.is_benign() => {}
                Err(err) => return Err(err),
            }
        }
        Ok(state)
    }

    fn locate(&self, uid: &str) -> Option<(usize, usize, usize)> {
        for (pi, p) in self.pipelines.iter().enumerate() {
            for (si, s) in p.stages.iter().enumerate() {
                if let Some(ti) = s.tasks.iter().position(|t| t.uid == uid) {
                    return Some((pi, si, ti));
                }
            }
        }
        None
    }

    pub fn task(&self, uid: &str) -> Option<&Task> {
        self.locate(uid).map(|(p, s, t)| &self.pipelines[p].stages[s].tasks[t])
    }

    pub fn pipeline(&self, uid: &str) -> Option<&Pipeline> {
        self.pipelines.iter().find(|p| p.uid == uid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.pipelines
            .iter()
            .flat_map(|p| p.stages.iter().flat_map(|s| s.tasks.iter()))
    }

    /// Location of a task as (pipeline uid, stage index).
    pub fn stage_of(&self, uid: &str) -> Option<(&str, usize)> {
        self.locate(uid).map(|(p, s, _)| (self.pipelines[p].uid.as_str(), s))
    }

    /// SPECIFIED tasks of the cursor stage of every RUNNING pipeline.
    pub fn ready_tasks(&self) -> Vec<&Task> {
        self.pipelines
            .iter()
            .filter(|p| p.control == PipelineState::Running)
            .filter_map(|p| p.stages.get(p.cursor))
            .flat_map(|s| s.tasks.iter().filter(|t| t.state == TaskState::Specified))
            .collect()
    }

    /// Tasks handed to the runtime whose outcome is not yet known.
    pub fn in_flight(&self) -> impl Iterator<Item = &Task> {
        self.tasks().filter(|t| {
            matches!(
                t.state,
                TaskState::Scheduled | TaskState::Submitted | TaskState::Executed
            )
        })
    }

    /// All pipelines terminal and nothing left in flight.
    pub fn is_finished(&self) -> bool {
        self.pipelines.iter().all(|p| p.control.is_terminal()) && self.in_flight().next().is_none()
    }

    pub fn apply(&mut self, entry: &JournalEntry) -> Result<Vec<Change>, WorkflowError> {
        match entry {
            JournalEntry::SetWorkflow {
                pipelines,
                failure_policy,
            } => {
                *self = AppManagerState::new(pipelines.clone(), *failure_policy)?;
                Ok(Vec::new())
            }
            JournalEntry::Task { uid, state, unit } => self.apply_task(uid, *state, unit.as_deref()),
            JournalEntry::Control { pipeline, action } => self.apply_control(pipeline, *action),
            JournalEntry::Adapt { mutation } => {
                self.apply_mutation(mutation)?;
                Ok(Vec::new())
            }
        }
    }

    /// Records a task outcome: SUBMITTED -> EXECUTED -> DONE or FAILED.
    ///
    /// Returns the journal entries applied and the resulting changes.
    pub fn mark_task_done(
        &mut self,
        uid: &str,
        success: bool,
    ) -> Result<(Vec<JournalEntry>, Vec<Change>), WorkflowError> {
        let current = self
            .task(uid)
            .ok_or_else(|| WorkflowError::UnknownTask(uid.into()))?
            .state;
        if current != TaskState::Submitted {
            return Err(WorkflowError::StaleUpdate {
                uid: uid.into(),
                current,
            });
        }
        let outcome = if success { TaskState::Done } else { TaskState::Failed };
        let entries = alloc::vec![
            JournalEntry::Task {
                uid: uid.into(),
                state: TaskState::Executed,
                unit: None
            },
            JournalEntry::Task {
                uid: uid.into(),
                state: outcome,
                unit: None
            },
        ];
        let mut changes = Vec::new();
        for e in &entries {
            changes.extend(self.apply(e)?);
        }
        Ok((entries, changes))
    }

    fn apply_task(&mut self, uid: &str, target: TaskState, unit: Option<&str>) -> Result<Vec<Change>, WorkflowError> {
        let (pi, si, ti) = self.locate(uid).ok_or_else(|| WorkflowError::UnknownTask(uid.into()))?;
        let current = self.pipelines[pi].stages[si].tasks[ti].state;
        if current == target || current.is_terminal() || current.ordinal() > target.ordinal() {
            return Err(WorkflowError::StaleUpdate {
                uid: uid.into(),
                current,
            });
        }
        if !current.allows(target) {
            return Err(WorkflowError::IllegalTransition {
                uid: uid.into(),
                from: current,
                to: target,
            });
        }
        self.pipelines[pi].stages[si].tasks[ti].state = target;
        if let Some(u) = unit {
            self.units.insert(uid.into(), u.into());
        }
        let mut changes = alloc::vec![Change::Task {
            uid: uid.into(),
            state: target
        }];

        let pipeline_uid = self.pipelines[pi].uid.clone();
        let stage = &mut self.pipelines[pi].stages[si];
        if target == TaskState::Scheduled && stage.state == StageState::Described {
            stage.state = StageState::Scheduled;
            changes.push(Change::Stage {
                pipeline: pipeline_uid.clone(),
                uid: stage.uid.clone(),
                state: StageState::Scheduled,
            });
        }
        if target.is_terminal() && stage.state == StageState::Scheduled && stage.all_terminal() {
            let failed = stage.tasks.iter().any(|t| t.state == TaskState::Failed);
            stage.state = if failed { StageState::Failed } else { StageState::Done };
            changes.push(Change::Stage {
                pipeline: pipeline_uid.clone(),
                uid: stage.uid.clone(),
                state: stage.state,
            });
            let p = &mut self.pipelines[pi];
            if !p.control.is_terminal() && si == p.cursor {
                if failed && self.failure_policy == FailurePolicy::FailFast {
                    changes.extend(Self::stop(p));
                } else {
                    p.cursor += 1;
                    changes.push(Change::Cursor {
                        pipeline: pipeline_uid.clone(),
                        cursor: p.cursor,
                    });
                    if p.cursor == p.stages.len() {
                        p.control = PipelineState::Done;
                        changes.push(Change::Pipeline {
                            uid: pipeline_uid,
                            state: PipelineState::Done,
                        });
                    }
                }
            }
        }
        Ok(changes)
    }

    fn stop(p: &mut Pipeline) -> Vec<Change> {
        p.control = PipelineState::Stopped;
        let mut changes = alloc::vec![Change::Pipeline {
            uid: p.uid.clone(),
            state: PipelineState::Stopped,
        }];
        for s in p.stages.iter_mut().skip(p.cursor) {
            if s.state == StageState::Described {
                s.state = StageState::Canceled;
                changes.push(Change::Stage {
                    pipeline: p.uid.clone(),
                    uid: s.uid.clone(),
                    state: StageState::Canceled,
                });
            }
        }
        changes
    }

    fn apply_control(&mut self, pipeline: &str, action: ControlAction) -> Result<Vec<Change>, WorkflowError> {
        let p = self
            .pipelines
            .iter_mut()
            .find(|p| p.uid == pipeline)
            .ok_or_else(|| WorkflowError::UnknownPipeline(pipeline.into()))?;
        let invalid = WorkflowError::InvalidControl {
            pipeline: pipeline.into(),
            state: p.control,
            action,
        };
        let target = match action {
            ControlAction::Suspend => PipelineState::Suspended,
            ControlAction::Resume => PipelineState::Running,
            ControlAction::Stop => PipelineState::Stopped,
        };
        let legal = match action {
            ControlAction::Suspend => p.control == PipelineState::Running,
            ControlAction::Resume => p.control == PipelineState::Suspended,
            ControlAction::Stop => !p.control.is_terminal(),
        };
        if !legal {
            return Err(invalid);
        }
        if action == ControlAction::Stop {
            return Ok(Self::stop(p));
        }
        p.control = target;
        Ok(alloc::vec![Change::Pipeline {
            uid: pipeline.into(),
            state: target,
        }])
    }

    fn existing_uids(&self) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        // Existing workflow was validated, so this cannot fail.
        let _ = collect_uids(self.pipelines.iter(), &mut seen);
        seen
    }

    fn apply_mutation(&mut self, mutation: &Mutation) -> Result<(), WorkflowError> {
        let mut seen = self.existing_uids();
        match mutation {
            Mutation::AddPipelines { pipelines } => {
                if pipelines.is_empty() {
                    return Err(WorkflowError::EmptyWorkflow);
                }
                check_pipelines(pipelines)?;
                collect_uids(pipelines.iter(), &mut seen)?;
                self.pipelines.extend(fresh_copy(pipelines));
            }
            Mutation::AddStages { pipeline, stages } => {
                let pi = self
                    .pipelines
                    .iter()
                    .position(|p| &p.uid == pipeline)
                    .ok_or_else(|| WorkflowError::UnknownPipeline(pipeline.clone()))?;
                if self.pipelines[pi].control.is_terminal() {
                    return Err(WorkflowError::ImmutablePast(pipeline.clone()));
                }
                if stages.is_empty() {
                    return Err(WorkflowError::EmptyPipeline(pipeline.clone()));
                }
                check_stages(stages)?;
                collect_stage_uids(stages.iter(), &mut seen)?;
                let mut fresh = Pipeline::new("", stages.clone());
                fresh = fresh_copy(core::slice::from_ref(&fresh)).remove(0);
                self.pipelines[pi].stages.extend(fresh.stages);
            }
            Mutation::AddTasks { pipeline, stage, tasks } => {
                let p = self
                    .pipelines
                    .iter_mut()
                    .find(|p| &p.uid == pipeline)
                    .ok_or_else(|| WorkflowError::UnknownPipeline(pipeline.clone()))?;
                let si = p
                    .stages
                    .iter()
                    .position(|s| &s.uid == stage)
                    .ok_or_else(|| WorkflowError::UnknownStage(stage.clone()))?;
                if p.control.is_terminal()
                    || si < p.cursor
                    || !p.stages[si].untouched()
                    || p.stages[si].state != StageState::Described
                {
                    return Err(WorkflowError::ImmutablePast(stage.clone()));
                }
                if tasks.is_empty() {
                    return Err(WorkflowError::EmptyStage(stage.clone()));
                }
                for t in tasks {
                    t.check()?;
                }
                collect_task_uids(tasks.iter(), &mut seen)?;
                p.stages[si].tasks.extend(tasks.iter().cloned().map(|mut t| {
                    t.state = TaskState::Specified;
                    t
                }));
            }
        }
        Ok(())
    }

    /// Terminal state of every task, by uid.
    pub fn task_states(&self) -> BTreeMap<String, TaskState> {
        self.tasks().map(|t| (t.uid.clone(), t.state)).collect()
    }

    pub fn pipeline_states(&self) -> BTreeMap<String, PipelineState> {
        self.pipelines.iter().map(|p| (p.uid.clone(), p.control)).collect()
    }
}

/// Task uid for position `i` within a stage, used when a file gives none.
pub fn default_task_uid(stage: &str, i: usize) -> String {
    format!("{stage}.task.{i:04}")
}

impl core::fmt::Display for ControlAction {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            ControlAction::Suspend => "suspend",
            ControlAction::Resume => "resume",
            ControlAction::Stop => "stop",
        })
    }
}
