//! Runs pipeline/stage/task workflows on a client session.
//!
//! The [`AppManager`] thread owns the only application state and journals
//! every change before acting on it. Two restartable workers sit between it
//! and the runtime: the WFProcessor forwards ready tasks to the TaskManager
//! and completions back, and the TaskManager turns tasks into units and unit
//! completions into task outcomes. Workers beat on a heartbeat queue; a
//! silent worker is replaced and the pipeline between the AppManager and the
//! runtime is rebuilt from the journaled state.

mod components;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc::{sync_channel, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, Session, SessionOptions, UnitManager};
use crate::clock;
use crate::mesh::store::{self, AppendLog, StoreError};
use crate::mesh::{Heartbeat, HeartbeatMonitor, Queue, DEFAULT_BULK};
use pilotkit_core::placement::SchedulingPolicy;
use pilotkit_core::state::{PipelineState, TaskState};
use pilotkit_core::workflow::{
    fresh_copy, validate_workflow, AppManagerState, Change, ControlAction, FailurePolicy, JournalEntry, Mutation,
    Pipeline, ResourceDesc, Stage, Task, WorkflowError,
};
use pilotkit_core::{EntityKind, Event, PilotDescription, StateMachine, Unit, UnitState};

use components::{spawn_taskmanager, spawn_wfprocessor, Instance, Wiring};

pub const JOURNAL_FILE: &str = "appmanager.jsonl";
/// Consecutive restarts without a task finishing before a run is abandoned.
pub const MAX_RESTARTS: u32 = 5;

const COMPONENT: &str = "appmanager";

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no workflow set")]
    NoWorkflow,
    #[error("no resource description set")]
    NoResource,
    #[error("resource acquisition failed: {0}")]
    ResourceAcquisitionFailed(String),
    #[error("{component} restarted {restarts} times without progress")]
    RecoveryLoop {
        component: EnsembleComponent,
        restarts: u32,
    },
    #[error("application is not running")]
    NotRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleComponent {
    WfProcessor,
    TaskManager,
}

impl EnsembleComponent {
    pub const ALL: [EnsembleComponent; 2] = [EnsembleComponent::WfProcessor, EnsembleComponent::TaskManager];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleComponent::WfProcessor => "wfprocessor",
            EnsembleComponent::TaskManager => "taskmanager",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl std::fmt::Display for EnsembleComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Crashes the first `times` instances of a component once each has handled
/// `after_messages` messages; the message being handled is lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub component: EnsembleComponent,
    pub after_messages: usize,
    #[serde(default = "one")]
    pub times: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub session: SessionOptions,
    /// Each run creates a fresh session directory below this one.
    pub session_root: PathBuf,
    pub failure_policy: FailurePolicy,
    pub policy: SchedulingPolicy,
    pub heartbeat_interval: Duration,
    pub max_restarts: u32,
    pub faults: Vec<FaultPlan>,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            session: SessionOptions::default(),
            session_root: std::env::temp_dir().join("pilotkit-sessions"),
            failure_policy: FailurePolicy::FailFast,
            policy: SchedulingPolicy::RoundRobin,
            heartbeat_interval: Duration::from_millis(200),
            max_restarts: MAX_RESTARTS,
            faults: Vec::new(),
        }
    }
}

/// Outcome of one [`AppManager::run`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub session_id: String,
    pub session_dir: PathBuf,
    pub tasks: BTreeMap<String, TaskState>,
    pub pipelines: BTreeMap<String, PipelineState>,
    /// Tasks dispatched again after a component restart.
    pub resubmissions: usize,
    pub restarts: BTreeMap<EnsembleComponent, u32>,
}

impl EnsembleReport {
    pub fn count(&self, state: TaskState) -> usize {
        self.tasks.values().filter(|s| **s == state).count()
    }

    pub fn done_tasks(&self) -> BTreeSet<String> {
        self.tasks
            .iter()
            .filter(|(_, s)| **s == TaskState::Done)
            .map(|(u, _)| u.clone())
            .collect()
    }

    pub fn is_success(&self) -> bool {
        self.tasks.values().all(|s| *s == TaskState::Done) && self.pipelines.values().all(|p| *p == PipelineState::Done)
    }
}

type Reply<T> = SyncSender<Result<T, EnsembleError>>;

enum ControlMsg {
    Control {
        pipeline: String,
        action: ControlAction,
        reply: Reply<()>,
    },
    Adapt {
        mutation: Mutation,
        reply: Reply<()>,
    },
    Recover {
        component: EnsembleComponent,
        reply: Reply<()>,
    },
    Snapshot {
        reply: Reply<AppManagerState>,
    },
}

/// Messages from workers to the AppManager.
#[derive(Debug, Clone)]
pub(crate) enum AppMsg {
    Submitted { uid: String, unit: String },
    Rejected { uid: String, reason: String },
    Outcome { uid: String, unit: String, success: bool },
}

/// Steers a running application from another thread.
#[derive(Clone)]
pub struct AppHandle {
    control: Queue<ControlMsg>,
    running: Arc<AtomicBool>,
}

impl AppHandle {
    fn request<T>(&self, make: impl FnOnce(Reply<T>) -> ControlMsg) -> Result<T, EnsembleError> {
        if !self.running.load(Ordering::SeqCst) {
            return Err(EnsembleError::NotRunning);
        }
        let (tx, rx) = sync_channel(1);
        self.control.put(make(tx)).map_err(|_| EnsembleError::NotRunning)?;
        loop {
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(r) => return r,
                Err(RecvTimeoutError::Timeout) if self.is_running() => {}
                Err(_) => return Err(EnsembleError::NotRunning),
            }
        }
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }

    fn control(&self, pipeline: &str, action: ControlAction) -> Result<(), EnsembleError> {
        self.request(|reply| ControlMsg::Control {
            pipeline: pipeline.into(),
            action,
            reply,
        })
    }

    /// Stops new dispatch from the pipeline; submitted tasks keep running.
    pub fn suspend(&self, pipeline: &str) -> Result<(), EnsembleError> {
        self.control(pipeline, ControlAction::Suspend)
    }

    pub fn resume(&self, pipeline: &str) -> Result<(), EnsembleError> {
        self.control(pipeline, ControlAction::Resume)
    }

    /// Ends the pipeline; work not yet dispatched is abandoned.
    pub fn stop(&self, pipeline: &str) -> Result<(), EnsembleError> {
        self.control(pipeline, ControlAction::Stop)
    }

    pub fn adapt(&self, mutation: Mutation) -> Result<(), EnsembleError> {
        self.request(|reply| ControlMsg::Adapt { mutation, reply })
    }

    /// Replaces a worker with a fresh instance.
    pub fn recover(&self, component: EnsembleComponent) -> Result<(), EnsembleError> {
        self.request(|reply| ControlMsg::Recover { component, reply })
    }

    pub fn snapshot(&self) -> Result<AppManagerState, EnsembleError> {
        self.request(|reply| ControlMsg::Snapshot { reply })
    }
}

static RUN_COUNTER: AtomicU32 = AtomicU32::new(0);

fn fresh_session_dir(root: &Path) -> PathBuf {
    loop {
        let n = RUN_COUNTER.fetch_add(1, Ordering::SeqCst);
        let name = format!(
            "ensemble.{}.{}.{n:04}",
            std::process::id(),
            (clock::wall_secs() * 1000.0) as u64
        );
        let dir = root.join(name);
        if !dir.exists() {
            return dir;
        }
    }
}

pub fn journal_path(session_dir: &Path) -> PathBuf {
    session_dir.join(JOURNAL_FILE)
}

pub fn read_journal(session_dir: &Path) -> Result<Vec<JournalEntry>, StoreError> {
    let r = store::replay::<JournalEntry>(&journal_path(session_dir), 1)?;
    Ok(r.records.into_iter().map(|(_, e)| e).collect())
}

/// Rebuilds the application state of a session from its journal alone.
pub fn replay_journal(session_dir: &Path) -> Result<AppManagerState, EnsembleError> {
    let entries = read_journal(session_dir)?;
    Ok(AppManagerState::replay(&entries)?)
}

/// Holds the workflow and resource description of an ensemble application.
pub struct AppManager {
    options: EnsembleOptions,
    workflow: Option<Vec<Pipeline>>,
    resource: Option<ResourceDesc>,
    control: Queue<ControlMsg>,
    running: Arc<AtomicBool>,
}

impl AppManager {
    pub fn new(options: EnsembleOptions) -> Self {
        AppManager {
            options,
            workflow: None,
            resource: None,
            control: Queue::new("appmanager.control"),
            running: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn options(&self) -> &EnsembleOptions {
        &self.options
    }

    /// Replaces any prior workflow. It is journaled when a run starts.
    pub fn set_workflow(&mut self, pipelines: Vec<Pipeline>) -> Result<(), WorkflowError> {
        validate_workflow(&pipelines)?;
        self.workflow = Some(pipelines);
        Ok(())
    }

    pub fn set_resource_desc(&mut self, desc: ResourceDesc) {
        self.resource = Some(desc);
    }

    pub fn handle(&self) -> AppHandle {
        AppHandle {
            control: self.control.clone(),
            running: Arc::clone(&self.running),
        }
    }

    /// Runs a fresh copy of the workflow in a new session below the
    /// configured session root.
    pub fn run(&mut self) -> Result<EnsembleReport, EnsembleError> {
        let dir = fresh_session_dir(&self.options.session_root);
        self.run_in(&dir)
    }

    /// Runs a fresh copy of the workflow in the session at `dir`.
    pub fn run_in(&mut self, dir: &Path) -> Result<EnsembleReport, EnsembleError> {
        let workflow = fresh_copy(self.workflow.as_ref().ok_or(EnsembleError::NoWorkflow)?);
        let resource = self.resource.clone().ok_or(EnsembleError::NoResource)?;
        self.control.drain();
        let session = Session::create(dir, self.options.session.clone())?;
        self.running.store(true, Ordering::SeqCst);
        let result = Runner::start(&self.options, &session, workflow, &resource).and_then(|mut r| {
            let out = r.run(&self.control);
            r.shutdown();
            out
        });
        self.running.store(false, Ordering::SeqCst);
        for msg in self.control.drain() {
            refuse(msg);
        }
        let closed = session.close();
        let report = result?;
        closed?;
        Ok(report)
    }
}

fn refuse(msg: ControlMsg) {
    match msg {
        ControlMsg::Control { reply, .. } | ControlMsg::Adapt { reply, .. } | ControlMsg::Recover { reply, .. } => {
            let _ = reply.send(Err(EnsembleError::NotRunning));
        }
        ControlMsg::Snapshot { reply } => {
            let _ = reply.send(Err(EnsembleError::NotRunning));
        }
    }
}

fn task_event(uid: &str, state: TaskState) -> Event {
    Event::new(clock::now(), EntityKind::Task, uid, state.name(), COMPONENT)
}

fn initial_events(pipelines: &[Pipeline], out: &mut Vec<Event>) {
    let now = clock::now();
    for p in pipelines {
        out.push(Event::new(
            now,
            EntityKind::Pipeline,
            &p.uid,
            p.control.name(),
            COMPONENT,
        ));
        stage_events(&p.uid, &p.stages, out);
    }
}

fn stage_events(pipeline: &str, stages: &[Stage], out: &mut Vec<Event>) {
    let now = clock::now();
    for s in stages {
        out.push(Event::new(now, EntityKind::Stage, &s.uid, s.state.name(), COMPONENT).with("pipeline", pipeline));
        task_events(&s.uid, &s.tasks, out);
    }
}

fn task_events(stage: &str, tasks: &[Task], out: &mut Vec<Event>) {
    let now = clock::now();
    for t in tasks {
        out.push(Event::new(now, EntityKind::Task, &t.uid, t.state.name(), COMPONENT).with("stage", stage));
    }
}

/// Live state of one run, owned by the AppManager thread.
struct Runner<'a> {
    options: &'a EnsembleOptions,
    session: &'a Session,
    umgr: Arc<UnitManager>,
    pilot: String,
    state: AppManagerState,
    journal: AppendLog,
    wiring: Wiring,
    instances: BTreeMap<EnsembleComponent, Instance>,
    spawned: BTreeMap<EnsembleComponent, u32>,
    restarts: BTreeMap<EnsembleComponent, u32>,
    stalled: u32,
    monitor: HeartbeatMonitor,
    resubmissions: usize,
    events: Vec<Event>,
}

impl<'a> Runner<'a> {
    fn start(
        options: &'a EnsembleOptions,
        session: &'a Session,
        workflow: Vec<Pipeline>,
        resource: &ResourceDesc,
    ) -> Result<Runner<'a>, EnsembleError> {
        let journal = AppendLog::open(&journal_path(session.dir()))?;
        let entry = JournalEntry::SetWorkflow {
            pipelines: workflow,
            failure_policy: options.failure_policy,
        };
        journal.append(std::slice::from_ref(&entry))?;
        let state = AppManagerState::replay([&entry])?;
        let mut events = Vec::new();
        initial_events(&state.pipelines, &mut events);
        session.store().persist_bulk(&events)?;
        events.clear();

        let mut pd = PilotDescription::new(&resource.resource, resource.cpus, resource.walltime);
        pd.gpus = resource.gpus;
        let pilots = session
            .pilot_manager()
            .submit_pilots(&[pd])
            .map_err(|e| EnsembleError::ResourceAcquisitionFailed(e.to_string()))?;
        let umgr = Arc::new(session.unit_manager(options.policy)?);
        umgr.add_pilots(&pilots)?;
        let wiring = Wiring {
            inbox: Queue::new("appmanager.inbox"),
            heartbeats: Queue::new("appmanager.heartbeats"),
            to_wfp: Queue::new("wfprocessor.enqueue"),
            to_tm: Queue::new("taskmanager.pending"),
            completed: Queue::new("wfprocessor.dequeue"),
            unit_done: umgr.subscribe()?,
            umgr: Arc::clone(&umgr),
            interval: options.heartbeat_interval,
        };
        let mut r = Runner {
            options,
            session,
            umgr,
            pilot: pilots[0].id.clone(),
            state,
            journal,
            wiring,
            instances: BTreeMap::new(),
            spawned: BTreeMap::new(),
            restarts: BTreeMap::new(),
            stalled: 0,
            monitor: HeartbeatMonitor::new(options.heartbeat_interval),
            resubmissions: 0,
            events: Vec::new(),
        };
        for c in EnsembleComponent::ALL {
            r.spawn(c)?;
        }
        r.record(Event::new(
            clock::now(),
            EntityKind::Component,
            r.entity(COMPONENT),
            "appmanager_started",
            COMPONENT,
        ));
        r.flush()?;
        Ok(r)
    }

    fn entity(&self, name: &str) -> String {
        format!("{}.{name}", self.session.id())
    }

    fn record(&mut self, e: Event) {
        self.events.push(e);
    }

    fn flush(&mut self) -> Result<(), EnsembleError> {
        if !self.events.is_empty() {
            self.session.store().persist_bulk(&self.events)?;
            self.events.clear();
        }
        Ok(())
    }

    fn fault_budget(&self, c: EnsembleComponent, instance: u32) -> Option<usize> {
        let mut seen = 0;
        for f in self.options.faults.iter().filter(|f| f.component == c) {
            if instance < seen + f.times {
                return Some(f.after_messages);
            }
            seen += f.times;
        }
        None
    }

    fn spawn(&mut self, c: EnsembleComponent) -> Result<(), EnsembleError> {
        let n = *self.spawned.get(&c).unwrap_or(&0);
        let budget = self.fault_budget(c, n);
        let inst = match c {
            EnsembleComponent::WfProcessor => spawn_wfprocessor(&self.wiring, budget),
            EnsembleComponent::TaskManager => spawn_taskmanager(&self.wiring, budget),
        }
        .map_err(ClientError::Spawn)?;
        self.spawned.insert(c, n + 1);
        self.instances.insert(c, inst);
        self.monitor.register(c.name(), Instant::now());
        Ok(())
    }

    /// Journals `entry`, applies it and records events for its effects.
    /// Late or duplicate updates are dropped without journaling.
    fn commit(&mut self, entry: JournalEntry) -> Result<bool, EnsembleError> {
        let mut trial = self.state.clone();
        let changes = match trial.apply(&entry) {
            Ok(c) => c,
            Err(e) if e.is_benign() => {
                log::debug!("ignoring {e}");
                return Ok(false);
            }
            Err(e) => return Err(e.into()),
        };
        self.journal.append(std::slice::from_ref(&entry))?;
        self.state = trial;
        match &entry {
            JournalEntry::Adapt { mutation } => match mutation {
                Mutation::AddPipelines { pipelines } => initial_events(&fresh_copy(pipelines), &mut self.events),
                Mutation::AddStages { pipeline, stages } => {
                    let p = Pipeline::new(pipeline.clone(), stages.clone());
                    let fresh = fresh_copy(std::slice::from_ref(&p)).remove(0);
                    stage_events(pipeline, &fresh.stages, &mut self.events);
                }
                Mutation::AddTasks { stage, tasks, .. } => task_events(stage, tasks, &mut self.events),
            },
            JournalEntry::Task {
                unit: Some(unit),
                uid,
                state,
            } => {
                self.events.push(task_event(uid, *state).with("unit", unit.as_str()));
                return self.changes(changes.into_iter().skip(1)).map(|_| true);
            }
            _ => {}
        }
        self.changes(changes.into_iter())?;
        Ok(true)
    }

    fn changes(&mut self, changes: impl Iterator<Item = Change>) -> Result<(), EnsembleError> {
        let now = clock::now();
        for c in changes {
            let e = match c {
                Change::Task { uid, state } => {
                    if state.is_terminal() {
                        self.stalled = 0;
                    }
                    Event::new(now, EntityKind::Task, uid, state.name(), COMPONENT)
                }
                Change::Stage { pipeline, uid, state } => {
                    Event::new(now, EntityKind::Stage, uid, state.name(), COMPONENT).with("pipeline", pipeline)
                }
                Change::Pipeline { uid, state } => Event::new(now, EntityKind::Pipeline, uid, state.name(), COMPONENT),
                Change::Cursor { .. } => continue,
            };
            self.events.push(e);
        }
        Ok(())
    }

    fn outcome(&mut self, uid: &str, success: bool) -> Result<(), EnsembleError> {
        if self.state.task(uid).map(|t| t.state) != Some(TaskState::Submitted) {
            log::debug!("stale outcome for {uid}");
            return Ok(());
        }
        let outcome = if success { TaskState::Done } else { TaskState::Failed };
        self.commit(JournalEntry::Task {
            uid: uid.into(),
            state: TaskState::Executed,
            unit: None,
        })?;
        self.commit(JournalEntry::Task {
            uid: uid.into(),
            state: outcome,
            unit: None,
        })?;
        Ok(())
    }

    fn submitted(&mut self, uid: &str, unit: &str) -> Result<(), EnsembleError> {
        self.commit(JournalEntry::Task {
            uid: uid.into(),
            state: TaskState::Submitted,
            unit: Some(unit.into()),
        })?;
        Ok(())
    }

    fn handle(&mut self, msg: AppMsg) -> Result<(), EnsembleError> {
        match msg {
            AppMsg::Submitted { uid, unit } => self.submitted(&uid, &unit),
            AppMsg::Rejected { uid, reason } => {
                log::warn!("task {uid} rejected: {reason}");
                self.commit(JournalEntry::Task {
                    uid: uid.clone(),
                    state: TaskState::Submitted,
                    unit: None,
                })?;
                self.outcome(&uid, false)
            }
            AppMsg::Outcome { uid, unit, success } => {
                log::debug!("task {uid}: unit {unit} finished");
                self.outcome(&uid, success)
            }
        }
    }

    fn control(&mut self, msg: ControlMsg) -> Result<(), EnsembleError> {
        match msg {
            ControlMsg::Control {
                pipeline,
                action,
                reply,
            } => {
                let r = self.commit(JournalEntry::Control { pipeline, action }).map(|_| ());
                let _ = reply.send(r);
            }
            ControlMsg::Adapt { mutation, reply } => {
                let r = self.commit(JournalEntry::Adapt { mutation }).map(|_| ());
                let _ = reply.send(r);
            }
            ControlMsg::Recover { component, reply } => match self.recover(component, "requested") {
                Ok(()) => {
                    let _ = reply.send(Ok(()));
                }
                Err(e) => {
                    let _ = reply.send(Err(copy_err(&e)));
                    return Err(e);
                }
            },
            ControlMsg::Snapshot { reply } => {
                let _ = reply.send(Ok(self.state.clone()));
            }
        }
        Ok(())
    }

    /// Replaces `c` and rebuilds the message flow from journaled state.
    fn recover(&mut self, c: EnsembleComponent, why: &str) -> Result<(), EnsembleError> {
        self.stalled += 1;
        if self.stalled > self.options.max_restarts {
            return Err(EnsembleError::RecoveryLoop {
                component: c,
                restarts: self.stalled - 1,
            });
        }
        if let Some(mut old) = self.instances.remove(&c) {
            old.kill();
        }
        self.monitor.forget(c.name());
        self.wiring.to_wfp.drain();
        self.wiring.to_tm.drain();
        self.wiring.completed.drain();
        *self.restarts.entry(c).or_default() += 1;
        self.spawn(c)?;
        let e = Event::new(
            clock::now(),
            EntityKind::Component,
            self.entity(c.name()),
            "component_restarted",
            COMPONENT,
        )
        .with("reason", why);
        self.record(e);
        self.resync()
    }

    /// Reconciles tasks in flight with what the runtime knows: units already
    /// submitted are adopted, finished units are reported, and tasks the
    /// runtime never saw are dispatched again.
    fn resync(&mut self) -> Result<(), EnsembleError> {
        let mut by_name: BTreeMap<String, Unit> = BTreeMap::new();
        for u in self.umgr.units() {
            if let Some(name) = u.description.name.clone() {
                // Unit ids grow with submission order; keep the newest.
                match by_name.get(&name) {
                    Some(prev) if prev.id > u.id => {}
                    _ => {
                        by_name.insert(name, u);
                    }
                }
            }
        }
        let in_flight: Vec<(String, TaskState)> = self.state.in_flight().map(|t| (t.uid.clone(), t.state)).collect();
        let mut resend = Vec::new();
        for (uid, st) in in_flight {
            let unit = match st {
                TaskState::Scheduled => by_name.get(&uid).cloned(),
                TaskState::Submitted => self.state.units.get(&uid).and_then(|id| self.umgr.unit(id)),
                _ => None,
            };
            match unit {
                Some(u) => {
                    if st == TaskState::Scheduled {
                        self.submitted(&uid, &u.id)?;
                    }
                    if u.state.is_terminal() {
                        self.outcome(&uid, u.state == UnitState::Done)?;
                    }
                }
                None if st == TaskState::Scheduled => resend.push(uid),
                None => {}
            }
        }
        if !resend.is_empty() {
            self.resubmissions += resend.len();
            let tasks: Vec<Task> = resend.iter().filter_map(|u| self.state.task(u).cloned()).collect();
            let _ = self.wiring.to_wfp.put_bulk(tasks);
        }
        Ok(())
    }

    fn dispatch(&mut self) -> Result<(), EnsembleError> {
        let ready: Vec<Task> = self.state.ready_tasks().into_iter().cloned().collect();
        if ready.is_empty() {
            return Ok(());
        }
        for t in &ready {
            self.commit(JournalEntry::Task {
                uid: t.uid.clone(),
                state: TaskState::Scheduled,
                unit: None,
            })?;
        }
        // Events for SCHEDULED go out before the tasks can reach the runtime.
        self.flush()?;
        let _ = self.wiring.to_wfp.put_bulk(ready);
        Ok(())
    }

    fn run(&mut self, control: &Queue<ControlMsg>) -> Result<EnsembleReport, EnsembleError> {
        loop {
            for msg in control.try_get_bulk(DEFAULT_BULK).unwrap_or_default() {
                self.control(msg)?;
            }
            let msgs = self
                .wiring
                .inbox
                .get_bulk(DEFAULT_BULK, Duration::from_millis(5))
                .unwrap_or_default();
            for m in msgs {
                self.handle(m)?;
            }
            let now = Instant::now();
            for hb in self.wiring.heartbeats.try_get_bulk(DEFAULT_BULK).unwrap_or_default() {
                let hb: Heartbeat = hb;
                self.monitor.observe(&hb, now);
            }
            for lost in self.monitor.lost(now) {
                if let Some(c) = EnsembleComponent::parse(&lost) {
                    log::warn!("{c} lost, restarting");
                    let e = Event::new(
                        clock::now(),
                        EntityKind::Component,
                        self.entity(c.name()),
                        "component_lost",
                        COMPONENT,
                    );
                    self.record(e);
                    self.recover(c, "heartbeat lost")?;
                }
            }
            self.dispatch()?;
            self.flush()?;
            if self.state.is_finished() {
                break;
            }
            if let Some(p) = self.session.pilot(&self.pilot) {
                if p.state.is_terminal() {
                    return Err(EnsembleError::ResourceAcquisitionFailed(format!(
                        "pilot {} ended {}",
                        p.id, p.state
                    )));
                }
            }
        }
        Ok(EnsembleReport {
            session_id: self.session.id().into(),
            session_dir: self.session.dir().to_path_buf(),
            tasks: self.state.task_states(),
            pipelines: self.state.pipeline_states(),
            resubmissions: self.resubmissions,
            restarts: self.restarts.clone(),
        })
    }

    fn shutdown(&mut self) {
        self.wiring.to_wfp.close();
        self.wiring.to_tm.close();
        self.wiring.completed.close();
        self.wiring.inbox.close();
        for (_, mut i) in std::mem::take(&mut self.instances) {
            i.kill();
        }
        let e = Event::new(
            clock::now(),
            EntityKind::Component,
            self.entity(COMPONENT),
            "appmanager_stopped",
            COMPONENT,
        );
        self.record(e);
        if let Err(e) = self.flush() {
            log::warn!("final events: {e}");
        }
    }
}

/// The run is about to end with `e`; callers waiting on it get what they can.
fn copy_err(e: &EnsembleError) -> EnsembleError {
    match e {
        EnsembleError::RecoveryLoop { component, restarts } => EnsembleError::RecoveryLoop {
            component: *component,
            restarts: *restarts,
        },
        _ => EnsembleError::NotRunning,
    }
}
