//! The client side of a session: [`PilotManager`] acquires pilots through a
//! resource backend, [`UnitManager`] binds units to active pilots late and
//! hands them to the pilots' agents over the persistent bridge.
//!
//! One coordinator thread owns every pilot and unit record and is the only
//! writer of the event log and the bridge inbox. Components (the launcher, one
//! scheduler per unit manager, the input stagers) are stateless workers that
//! talk to it through queues, so any of them can be killed and restarted: the
//! coordinator resends what the lost instance held.

mod components;
mod coordinator;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use pilotkit_core::launch::{AgentLaunch, ResourceConfig};
use pilotkit_core::model::{pilot_id, unit_id, JobHandle};
use pilotkit_core::placement::SchedulingPolicy;
use pilotkit_core::{
    validate_unit_description, Pilot, PilotDescription, PilotState, StagingDirective, StateMachine, Unit,
    UnitDescription, UnitState, ValidationError,
};

use crate::backend::{Backend, BackendError, ConfigLoadError, Registry};
use crate::mesh::store::{Replay, SessionStore, StoreError};
use crate::mesh::Queue;
use pilotkit_core::Event;

use components::{spawn_launcher, spawn_scheduler, spawn_stager, Worker};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigLoadError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("pilot {0} is already attached")]
    DuplicateAttachment(String),
    #[error("unknown pilot {0}")]
    UnknownPilot(String),
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("timed out with {pending} entities still running")]
    Timeout { pending: usize },
    #[error("session is closed")]
    Closed,
    #[error("cannot start component: {0}")]
    Spawn(std::io::Error),
    #[error("session failed: {0}")]
    Fatal(String),
}

/// Knobs for a session; the defaults suit tests and small runs.
#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub registry: Registry,
    /// Relative input sources are read from here and outputs are written here.
    pub data_root: PathBuf,
    /// Executor workers per agent; `None` means available parallelism.
    pub agent_executors: Option<usize>,
    pub agent_stagers: usize,
    pub agent_poll_ms: u64,
    /// Overrides the resource's `agent_launch`.
    pub agent_launch: Option<AgentLaunch>,
    pub client_stagers: usize,
    /// How long [`Session::close`] waits for agents to exit before canceling
    /// their jobs.
    pub shutdown_timeout: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            registry: Registry::builtin(),
            data_root: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            agent_executors: None,
            agent_stagers: 1,
            agent_poll_ms: 5,
            agent_launch: None,
            client_stagers: 1,
            shutdown_timeout: Duration::from_secs(30),
        }
    }
}

/// Restartable client components.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Launcher,
    /// The scheduler of the named unit manager.
    Scheduler(String),
    StagerInput,
}

type Reply = SyncSender<()>;

/// Messages to the coordinator.
pub(crate) enum CoordMsg {
    NewPilots {
        pilots: Vec<(Pilot, ResourceConfig)>,
        reply: Reply,
    },
    NewUmgr {
        id: String,
        queue: Queue<SchedMsg>,
        reply: Reply,
    },
    Attach {
        umgr: String,
        pilots: Vec<String>,
        reply: Reply,
    },
    NewUnits {
        umgr: String,
        units: Vec<Unit>,
        reply: Reply,
    },
    Subscribe {
        umgr: String,
        queue: Queue<Unit>,
        reply: Reply,
    },
    CancelPilots {
        ids: Vec<String>,
        reply: Reply,
    },
    ShutdownPilots {
        reply: Reply,
    },
    Resync {
        component: Component,
        reply: Reply,
    },
    Stop {
        reply: Reply,
    },
    PilotUpdate {
        pilot: String,
        to: PilotState,
        handle: Option<JobHandle>,
        reason: Option<String>,
    },
    Assign {
        unit: String,
        pilot: String,
    },
    Unschedulable {
        unit: String,
        reason: String,
    },
    Staged {
        unit: String,
        pilot: String,
        input_staging: Vec<StagingDirective>,
        sandbox: String,
    },
    StageFailed {
        unit: String,
        reason: String,
    },
}

pub(crate) enum LaunchMsg {
    Launch {
        pilot: Pilot,
        config: Box<ResourceConfig>,
    },
    Track {
        pilot: String,
        resource: String,
        handle: JobHandle,
        state: PilotState,
    },
    Cancel {
        pilot: String,
    },
}

pub(crate) struct PendingUnit {
    pub unit: String,
    pub cores: u32,
    pub gpus: u32,
}

pub(crate) enum SchedMsg {
    Attach {
        pilot: String,
        cores: u32,
        gpus: u32,
        state: PilotState,
    },
    PilotState {
        pilot: String,
        state: PilotState,
    },
    Schedule(Vec<PendingUnit>),
    Claim {
        pilot: String,
        cores: u32,
    },
    Release {
        pilot: String,
        cores: u32,
    },
}

pub(crate) struct StageMsg {
    pub unit: Unit,
    pub pilot: String,
}

/// Every record the coordinator owns. Only the coordinator mutates it; API
/// calls read snapshots.
#[derive(Default)]
pub(crate) struct Tables {
    pub pilots: BTreeMap<String, Pilot>,
    pub units: BTreeMap<String, Unit>,
    /// Unit to unit manager.
    pub owner: BTreeMap<String, String>,
    /// Unit to the pilot it was bound to, from assignment on.
    pub assigned: BTreeMap<String, String>,
    /// Unit manager to attached pilots, in attachment order.
    pub attached: BTreeMap<String, Vec<String>>,
    pub stopped: bool,
    pub fatal: Option<String>,
}

pub(crate) struct Shared {
    pub store: Arc<SessionStore>,
    pub options: SessionOptions,
    pub cmd: Queue<CoordMsg>,
    pub tables: Mutex<Tables>,
    pub changed: Condvar,
    pub backends: Mutex<BTreeMap<String, Arc<dyn Backend>>>,
    next_pilot: AtomicU32,
    next_unit: AtomicU64,
    next_umgr: AtomicU32,
}

impl Shared {
    pub fn lock(&self) -> MutexGuard<'_, Tables> {
        self.tables.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Sends a request to the coordinator and waits until it has been applied
    /// and persisted.
    fn request(&self, make: impl FnOnce(Reply) -> CoordMsg) -> Result<(), ClientError> {
        let (tx, rx) = sync_channel(1);
        self.cmd.put(make(tx)).map_err(|_| ClientError::Closed)?;
        rx.recv().map_err(|_| match self.lock().fatal.clone() {
            Some(f) => ClientError::Fatal(f),
            None => ClientError::Closed,
        })
    }

    /// Waits until `done` holds, waking on every coordinator batch.
    fn wait_until<T>(
        &self,
        timeout: Option<Duration>,
        mut done: impl FnMut(&Tables) -> Result<T, usize>,
    ) -> Result<T, ClientError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut t = self.lock();
        loop {
            let pending = match done(&t) {
                Ok(v) => return Ok(v),
                Err(pending) => pending,
            };
            if let Some(f) = &t.fatal {
                return Err(ClientError::Fatal(f.clone()));
            }
            if t.stopped {
                return Err(ClientError::Closed);
            }
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(ClientError::Timeout { pending });
                    }
                    (d - now).min(Duration::from_millis(200))
                }
                None => Duration::from_millis(200),
            };
            t = self.changed.wait_timeout(t, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

struct Components {
    launcher: Worker,
    launcher_q: Queue<LaunchMsg>,
    stagers: Vec<Worker>,
    stager_q: Queue<StageMsg>,
    schedulers: BTreeMap<String, (Worker, Queue<SchedMsg>)>,
    coordinator: Option<JoinHandle<()>>,
}

/// One end-to-end execution context backed by a session directory.
pub struct Session {
    shared: Arc<Shared>,
    components: Mutex<Components>,
    closed: AtomicBool,
}

impl Session {
    /// Creates (or reopens for appending) the session at `dir` and starts the
    /// client components.
    pub fn create(dir: &Path, options: SessionOptions) -> Result<Session, ClientError> {
        let store = Arc::new(SessionStore::create(dir)?);
        let shared = Arc::new(Shared {
            store,
            options,
            cmd: Queue::new("client.coordinator"),
            tables: Mutex::new(Tables::default()),
            changed: Condvar::new(),
            backends: Mutex::new(BTreeMap::new()),
            next_pilot: AtomicU32::new(0),
            next_unit: AtomicU64::new(0),
            next_umgr: AtomicU32::new(0),
        });
        let launcher_q = Queue::new("client.launcher");
        let stager_q = Queue::new("client.stager_input");
        let coordinator = coordinator::spawn(Arc::clone(&shared), launcher_q.clone(), stager_q.clone())?;
        let launcher = spawn_launcher(Arc::clone(&shared), launcher_q.clone())?;
        let stagers = (0..shared.options.client_stagers.max(1))
            .map(|i| spawn_stager(Arc::clone(&shared), stager_q.clone(), i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Session {
            shared,
            components: Mutex::new(Components {
                launcher,
                launcher_q,
                stagers,
                stager_q,
                schedulers: BTreeMap::new(),
                coordinator: Some(coordinator),
            }),
            closed: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> &str {
        self.shared.store.id()
    }

    pub fn dir(&self) -> &Path {
        self.shared.store.dir()
    }

    /// The session's event store, shared with layers above the client.
    pub fn store(&self) -> Arc<SessionStore> {
        Arc::clone(&self.shared.store)
    }

    pub fn options(&self) -> &SessionOptions {
        &self.shared.options
    }

    pub fn events(&self) -> Result<Replay<Event>, ClientError> {
        Ok(self.shared.store.replay(1)?)
    }

    pub fn pilot_manager(&self) -> PilotManager {
        PilotManager {
            shared: Arc::clone(&self.shared),
        }
    }

    pub fn unit_manager(&self, policy: SchedulingPolicy) -> Result<UnitManager, ClientError> {
        let id = format!("umgr.{:04}", self.shared.next_umgr.fetch_add(1, Ordering::SeqCst));
        let queue = Queue::new(format!("{id}.scheduler"));
        let worker = spawn_scheduler(Arc::clone(&self.shared), queue.clone(), id.clone(), policy)?;
        self.components
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .schedulers
            .insert(id.clone(), (worker, queue.clone()));
        self.shared.request(|reply| CoordMsg::NewUmgr {
            id: id.clone(),
            queue,
            reply,
        })?;
        Ok(UnitManager {
            shared: Arc::clone(&self.shared),
            id,
            attached: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn pilot(&self, id: &str) -> Option<Pilot> {
        self.shared.lock().pilots.get(id).cloned()
    }

    pub fn unit(&self, id: &str) -> Option<Unit> {
        self.shared.lock().units.get(id).cloned()
    }

    /// Kills a component (dropping whatever it was holding) and starts a
    /// fresh instance that resynchronizes from the coordinator.
    pub fn restart_component(&self, component: &Component) -> Result<(), ClientError> {
        let mut c = self.components.lock().unwrap_or_else(|e| e.into_inner());
        match component {
            Component::Launcher => {
                c.launcher.kill();
                c.launcher_q.drain();
                c.launcher = spawn_launcher(Arc::clone(&self.shared), c.launcher_q.clone())?;
            }
            Component::StagerInput => {
                for mut w in c.stagers.drain(..) {
                    w.kill();
                }
                c.stager_q.drain();
                c.stagers = (0..self.shared.options.client_stagers.max(1))
                    .map(|i| spawn_stager(Arc::clone(&self.shared), c.stager_q.clone(), i))
                    .collect::<Result<Vec<_>, _>>()?;
            }
            Component::Scheduler(umgr) => {
                let (mut worker, queue) = c
                    .schedulers
                    .remove(umgr)
                    .ok_or_else(|| ClientError::UnknownUnit(umgr.clone()))?;
                worker.kill();
                queue.drain();
                let policy = worker.policy.unwrap_or_default();
                let fresh = spawn_scheduler(Arc::clone(&self.shared), queue.clone(), umgr.clone(), policy)?;
                c.schedulers.insert(umgr.clone(), (fresh, queue));
            }
        }
        drop(c);
        self.shared.request(|reply| CoordMsg::Resync {
            component: component.clone(),
            reply,
        })
    }

    /// Asks every agent to finish, waits for the pilots to end, stops the
    /// components and cancels whatever did not complete.
    pub fn close(&self) -> Result<(), ClientError> {
        if self.closed.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let all_terminal = |t: &Tables| {
            let n = t.pilots.values().filter(|p| !p.state.is_terminal()).count();
            if n == 0 {
                Ok(())
            } else {
                Err(n)
            }
        };
        let mut result = self.shared.request(|reply| CoordMsg::ShutdownPilots { reply });
        if result.is_ok() {
            let timeout = Some(self.shared.options.shutdown_timeout);
            if let Err(ClientError::Timeout { .. }) = self.shared.wait_until(timeout, all_terminal) {
                let ids: Vec<String> = self.shared.lock().pilots.keys().cloned().collect();
                result = self.shared.request(|reply| CoordMsg::CancelPilots { ids, reply });
                let _ = self.shared.wait_until(Some(Duration::from_secs(10)), all_terminal);
            }
        }
        let mut c = self.components.lock().unwrap_or_else(|e| e.into_inner());
        c.launcher_q.close();
        c.stager_q.close();
        for (_, q) in c.schedulers.values() {
            q.close();
        }
        c.launcher.join();
        for mut w in c.stagers.drain(..) {
            w.join();
        }
        for (_, (mut w, _)) in std::mem::take(&mut c.schedulers) {
            w.join();
        }
        let stop = self.shared.request(|reply| CoordMsg::Stop { reply });
        if let Some(h) = c.coordinator.take() {
            let _ = h.join();
        }
        if let Some(f) = self.shared.lock().fatal.clone() {
            return Err(ClientError::Fatal(f));
        }
        result.and(stop)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::warn!("closing session {}: {e}", self.id());
        }
    }
}

/// Submits pilots and follows their lifecycle.
#[derive(Clone)]
pub struct PilotManager {
    shared: Arc<Shared>,
}

impl PilotManager {
    /// Returns one pilot per description, each already LAUNCHING. A backend
    /// refusal shows up later as that pilot FAILED.
    pub fn submit_pilots(&self, descs: &[PilotDescription]) -> Result<Vec<Pilot>, ClientError> {
        if descs.is_empty() {
            return Ok(Vec::new());
        }
        let mut pilots = Vec::with_capacity(descs.len());
        for d in descs {
            d.validate()?;
            let config = self.shared.options.registry.get(&d.resource)?.clone();
            let id = pilot_id(self.shared.next_pilot.fetch_add(1, Ordering::SeqCst));
            pilots.push((Pilot::new(id, d.clone()), config));
        }
        let ids: Vec<String> = pilots.iter().map(|(p, _)| p.id.clone()).collect();
        self.shared.request(|reply| CoordMsg::NewPilots { pilots, reply })?;
        let t = self.shared.lock();
        Ok(ids.iter().filter_map(|id| t.pilots.get(id).cloned()).collect())
    }

    pub fn pilot(&self, id: &str) -> Option<Pilot> {
        self.shared.lock().pilots.get(id).cloned()
    }

    /// Waits until every named pilot is in one of `states` or terminal.
    pub fn wait_pilots(
        &self,
        ids: &[String],
        states: &[PilotState],
        timeout: Option<Duration>,
    ) -> Result<BTreeMap<String, PilotState>, ClientError> {
        self.shared.wait_until(timeout, |t| {
            let mut out = BTreeMap::new();
            let mut pending = 0;
            for id in ids {
                match t.pilots.get(id) {
                    Some(p) if p.state.is_terminal() || states.contains(&p.state) => {
                        out.insert(id.clone(), p.state);
                    }
                    Some(_) => pending += 1,
                    None => pending += 1,
                }
            }
            if pending == 0 {
                Ok(out)
            } else {
                Err(pending)
            }
        })
    }

    pub fn cancel_pilots(&self, ids: &[String]) -> Result<(), ClientError> {
        let ids = ids.to_vec();
        self.shared.request(|reply| CoordMsg::CancelPilots { ids, reply })
    }
}

/// Accepts units and binds them to its attached pilots.
pub struct UnitManager {
    shared: Arc<Shared>,
    id: String,
    attached: Mutex<BTreeSet<String>>,
}

impl UnitManager {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn add_pilots(&self, pilots: &[Pilot]) -> Result<(), ClientError> {
        let mut attached = self.attached.lock().unwrap_or_else(|e| e.into_inner());
        let mut ids = Vec::new();
        for p in pilots {
            if attached.contains(&p.id) || ids.contains(&p.id) {
                return Err(ClientError::DuplicateAttachment(p.id.clone()));
            }
            if !self.shared.lock().pilots.contains_key(&p.id) {
                return Err(ClientError::UnknownPilot(p.id.clone()));
            }
            ids.push(p.id.clone());
        }
        attached.extend(ids.iter().cloned());
        self.shared.request(|reply| CoordMsg::Attach {
            umgr: self.id.clone(),
            pilots: ids,
            reply,
        })
    }

    /// Validates each description; valid ones enter UMGR_SCHEDULING as one
    /// bulk, invalid ones are returned as errors in their position.
    pub fn submit_units(&self, cuds: Vec<UnitDescription>) -> Result<Vec<Result<Unit, ValidationError>>, ClientError> {
        let mut out = Vec::with_capacity(cuds.len());
        let mut units = Vec::new();
        for cud in cuds {
            match validate_unit_description(cud) {
                Ok(v) => {
                    let u = Unit::new(unit_id(self.shared.next_unit.fetch_add(1, Ordering::SeqCst)), v);
                    units.push(u.clone());
                    out.push(Ok(u));
                }
                Err(e) => out.push(Err(e)),
            }
        }
        if !units.is_empty() {
            let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
            self.shared.request(|reply| CoordMsg::NewUnits {
                umgr: self.id.clone(),
                units,
                reply,
            })?;
            let t = self.shared.lock();
            let mut fresh = ids.iter().map(|id| t.units[id].clone());
            for slot in out.iter_mut().filter(|r| r.is_ok()) {
                *slot = Ok(fresh.next().expect("one snapshot per accepted unit"));
            }
        }
        Ok(out)
    }

    /// Blocks until the named units (all of this manager's when `None`) are
    /// terminal and returns their final states.
    pub fn wait_units(
        &self,
        ids: Option<&[String]>,
        timeout: Option<Duration>,
    ) -> Result<BTreeMap<String, UnitState>, ClientError> {
        let wanted: Option<Vec<String>> = ids.map(|i| i.to_vec());
        let me = self.id.clone();
        self.shared.wait_until(timeout, |t| {
            let mut out = BTreeMap::new();
            let mut pending = 0;
            let mut visit = |id: &String| match t.units.get(id) {
                Some(u) if u.state.is_terminal() => {
                    out.insert(id.clone(), u.state);
                }
                _ => pending += 1,
            };
            match &wanted {
                Some(ids) => ids.iter().for_each(&mut visit),
                None => t.owner.iter().filter(|(_, m)| **m == me).for_each(|(id, _)| visit(id)),
            }
            if pending == 0 {
                Ok(out)
            } else {
                Err(pending)
            }
        })
    }

    pub fn units(&self) -> Vec<Unit> {
        let t = self.shared.lock();
        t.owner
            .iter()
            .filter(|(_, m)| **m == self.id)
            .filter_map(|(id, _)| t.units.get(id).cloned())
            .collect()
    }

    pub fn unit(&self, id: &str) -> Option<Unit> {
        self.shared.lock().units.get(id).cloned()
    }

    /// A queue receiving a snapshot of each of this manager's units as it
    /// reaches a terminal state.
    pub fn subscribe(&self) -> Result<Queue<Unit>, ClientError> {
        let queue = Queue::new(format!("{}.completions", self.id));
        self.shared.request(|reply| CoordMsg::Subscribe {
            umgr: self.id.clone(),
            queue: queue.clone(),
            reply,
        })?;
        Ok(queue)
    }
}
