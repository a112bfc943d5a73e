//! The client coordinator: sole owner of pilot and unit records, sole writer
//! of the event log and the bridge inbox.
//!
//! Each iteration takes a bulk of commands, then reads whatever agents have
//! appended to the outbox. Outbox updates are applied first: an agent writes
//! all of its updates before its job can be seen ending, so by the time a
//! pilot's end is applied every update from its agent has been too. The
//! resulting events are persisted in one write before anything is forwarded
//! or acknowledged.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use pilotkit_core::launch::ResourceConfig;
use pilotkit_core::model::SlotSummary;
use pilotkit_core::{transition, EntityKind, Event, PilotState, StateMachine, Timestamp, Unit, UnitState};

use super::{ClientError, Component, CoordMsg, LaunchMsg, PendingUnit, Reply, SchedMsg, Shared, StageMsg, Tables};
use crate::bridge::{InboxMsg, OutboxMsg};
use crate::clock;
use crate::mesh::store::{self, AppendLog, LogTail, StoreError};
use crate::mesh::{Queue, DEFAULT_BULK};

const POLL: Duration = Duration::from_millis(5);
const CURSOR_EVERY: Duration = Duration::from_millis(250);
const OUTBOX_CURSOR: &str = "client.outbox";

#[derive(Default)]
struct Tx {
    events: Vec<Event>,
    inbox: BTreeMap<String, Vec<Unit>>,
    shutdowns: Vec<String>,
    launch: Vec<LaunchMsg>,
    stage: Vec<StageMsg>,
    sched: Vec<(String, SchedMsg)>,
    completed: Vec<(String, Unit)>,
    replies: Vec<Reply>,
    stop: bool,
}

struct Coordinator {
    shared: Arc<Shared>,
    launcher: Queue<LaunchMsg>,
    stager: Queue<StageMsg>,
    schedulers: BTreeMap<String, Queue<SchedMsg>>,
    subscribers: BTreeMap<String, Vec<Queue<Unit>>>,
    configs: BTreeMap<String, ResourceConfig>,
    inbox: AppendLog,
    outbox: LogTail,
    cursor_saved: (u64, Instant),
}

pub(super) fn spawn(
    shared: Arc<Shared>,
    launcher: Queue<LaunchMsg>,
    stager: Queue<StageMsg>,
) -> Result<JoinHandle<()>, ClientError> {
    let dir = shared.store.dir().to_path_buf();
    let inbox = AppendLog::open(&store::inbox_path(&dir))?;
    let c = Coordinator {
        shared,
        launcher,
        stager,
        schedulers: BTreeMap::new(),
        subscribers: BTreeMap::new(),
        configs: BTreeMap::new(),
        inbox,
        outbox: LogTail::new(&store::outbox_path(&dir)),
        cursor_saved: (0, Instant::now()),
    };
    std::thread::Builder::new()
        .name("client.coordinator".into())
        .spawn(move || c.run())
        .map_err(ClientError::Spawn)
}

fn payload(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl Coordinator {
    fn run(mut self) {
        let shared = Arc::clone(&self.shared);
        let start = Event::new(
            clock::now(),
            EntityKind::Component,
            shared.store.id(),
            "session_started",
            "client",
        );
        if let Err(e) = shared.store.persist(&start) {
            return self.die(&e);
        }
        loop {
            let cmds = shared.cmd.get_bulk(DEFAULT_BULK, POLL).unwrap_or_default();
            let outbox = match self.outbox.read_new::<OutboxMsg>() {
                Ok(o) => o,
                Err(e) => return self.die(&e),
            };
            let mut tx = Tx::default();
            let mut t = shared.lock();
            for (_, m) in outbox {
                match m {
                    Ok(m) => self.on_outbox(&mut t, &mut tx, m),
                    Err(e) => log::warn!("outbox: {e}"),
                }
            }
            for c in cmds {
                self.on_cmd(&mut t, &mut tx, c);
            }
            if tx.stop {
                tx.events.push(Event::new(
                    clock::now(),
                    EntityKind::Component,
                    shared.store.id(),
                    "session_closed",
                    "client",
                ));
            }
            if let Err(e) = self.persist(&mut tx) {
                drop(t);
                return self.die(&e);
            }
            if tx.stop {
                t.stopped = true;
            }
            drop(t);
            self.dispatch(tx.launch, tx.stage, tx.sched, tx.completed);
            self.save_cursor(tx.stop);
            for r in tx.replies {
                let _ = r.send(());
            }
            shared.changed.notify_all();
            if tx.stop {
                break;
            }
        }
        shared.cmd.close();
        shared.cmd.drain();
    }

    fn die(self, e: &StoreError) {
        log::error!("session store failure: {e}");
        self.shared.lock().fatal = Some(e.to_string());
        self.shared.changed.notify_all();
        self.shared.cmd.close();
        // Dropping the pending requests wakes their senders.
        self.shared.cmd.drain();
    }

    fn persist(&mut self, tx: &mut Tx) -> Result<(), StoreError> {
        if !tx.events.is_empty() {
            self.shared.store.persist_bulk(&tx.events)?;
        }
        let mut msgs: Vec<InboxMsg> = std::mem::take(&mut tx.inbox)
            .into_iter()
            .map(|(pilot, units)| InboxMsg::Units { pilot, units })
            .collect();
        msgs.extend(tx.shutdowns.drain(..).map(|pilot| InboxMsg::Shutdown { pilot }));
        if !msgs.is_empty() {
            self.inbox.append(&msgs)?;
        }
        Ok(())
    }

    fn dispatch(
        &self,
        launch: Vec<LaunchMsg>,
        stage: Vec<StageMsg>,
        sched: Vec<(String, SchedMsg)>,
        completed: Vec<(String, Unit)>,
    ) {
        // Sends to closed queues only happen while the session shuts down.
        if !launch.is_empty() {
            let _ = self.launcher.put_bulk(launch);
        }
        if !stage.is_empty() {
            let _ = self.stager.put_bulk(stage);
        }
        let mut by_umgr: BTreeMap<String, Vec<SchedMsg>> = BTreeMap::new();
        for (umgr, m) in sched {
            by_umgr.entry(umgr).or_default().push(m);
        }
        for (umgr, msgs) in by_umgr {
            if let Some(q) = self.schedulers.get(&umgr) {
                let _ = q.put_bulk(msgs);
            }
        }
        for (umgr, unit) in completed {
            for q in self.subscribers.get(&umgr).into_iter().flatten() {
                let _ = q.put(unit.clone());
            }
        }
    }

    fn save_cursor(&mut self, force: bool) {
        let pos = self.outbox.position();
        if pos > self.cursor_saved.0 && (force || self.cursor_saved.1.elapsed() >= CURSOR_EVERY) {
            if let Err(e) = store::save_cursor(self.shared.store.dir(), OUTBOX_CURSOR, pos) {
                log::warn!("saving outbox cursor: {e}");
            }
            self.cursor_saved = (pos, Instant::now());
        }
    }

    fn on_outbox(&mut self, t: &mut Tables, tx: &mut Tx, m: OutboxMsg) {
        match m {
            OutboxMsg::Unit(u) => {
                if t.units.get(&u.unit_id).and_then(|x| x.pilot_id.as_deref()) != Some(u.pilot.as_str()) {
                    log::debug!("ignoring update for {} from {}", u.unit_id, u.pilot);
                    return;
                }
                self.unit_to(
                    t,
                    tx,
                    &u.unit_id,
                    Some(u.from),
                    u.to,
                    &u.component,
                    u.payload,
                    Some(u.timestamp),
                );
            }
            OutboxMsg::Record { event, .. } => tx.events.push(event),
        }
    }

    fn on_cmd(&mut self, t: &mut Tables, tx: &mut Tx, c: CoordMsg) {
        match c {
            CoordMsg::NewPilots { pilots, reply } => {
                for (p, config) in pilots {
                    let ev = Event::new(clock::now(), EntityKind::Pilot, &p.id, PilotState::New.name(), "pmgr")
                        .with("cores", p.description.cores.to_string())
                        .with("gpus", p.description.gpus.to_string())
                        .with("resource", p.description.resource.clone());
                    tx.events.push(ev);
                    let id = p.id.clone();
                    t.pilots.insert(id.clone(), p);
                    self.configs.insert(id.clone(), config.clone());
                    self.pilot_to(t, tx, &id, PilotState::Launching, None, None);
                    tx.launch.push(LaunchMsg::Launch {
                        pilot: t.pilots[&id].clone(),
                        config: Box::new(config),
                    });
                }
                tx.replies.push(reply);
            }
            CoordMsg::NewUmgr { id, queue, reply } => {
                self.schedulers.insert(id.clone(), queue);
                t.attached.entry(id).or_default();
                tx.replies.push(reply);
            }
            CoordMsg::Attach { umgr, pilots, reply } => {
                for id in pilots {
                    let Some(p) = t.pilots.get(&id) else { continue };
                    tx.sched.push((umgr.clone(), attach_msg(p)));
                    t.attached.entry(umgr.clone()).or_default().push(id);
                }
                tx.replies.push(reply);
            }
            CoordMsg::NewUnits { umgr, units, reply } => {
                let mut pending = Vec::with_capacity(units.len());
                for u in units {
                    let id = u.id.clone();
                    tx.events.push(
                        Event::new(clock::now(), EntityKind::Unit, &id, UnitState::New.name(), "umgr")
                            .with("umgr", umgr.clone())
                            .with("cores", u.description.cores.to_string()),
                    );
                    pending.push(PendingUnit {
                        unit: id.clone(),
                        cores: u.description.cores,
                        gpus: u.description.gpus,
                    });
                    t.units.insert(id.clone(), u);
                    t.owner.insert(id.clone(), umgr.clone());
                    self.unit_to(
                        t,
                        tx,
                        &id,
                        None,
                        UnitState::UmgrScheduling,
                        "umgr",
                        BTreeMap::new(),
                        None,
                    );
                }
                tx.sched.push((umgr, SchedMsg::Schedule(pending)));
                tx.replies.push(reply);
            }
            CoordMsg::Subscribe { umgr, queue, reply } => {
                self.subscribers.entry(umgr).or_default().push(queue);
                tx.replies.push(reply);
            }
            CoordMsg::CancelPilots { ids, reply } => {
                for id in ids {
                    if t.pilots.get(&id).is_some_and(|p| !p.state.is_terminal()) {
                        tx.launch.push(LaunchMsg::Cancel { pilot: id });
                    }
                }
                tx.replies.push(reply);
            }
            CoordMsg::ShutdownPilots { reply } => {
                for (id, p) in &t.pilots {
                    match p.state {
                        PilotState::Active => tx.shutdowns.push(id.clone()),
                        s if !s.is_terminal() => tx.launch.push(LaunchMsg::Cancel { pilot: id.clone() }),
                        _ => {}
                    }
                }
                tx.replies.push(reply);
            }
            CoordMsg::Resync { component, reply } => {
                self.resync(t, tx, &component);
                tx.replies.push(reply);
            }
            CoordMsg::Stop { reply } => {
                let open: Vec<String> = t
                    .pilots
                    .iter()
                    .filter(|(_, p)| !p.state.is_terminal())
                    .map(|(k, _)| k.clone())
                    .collect();
                for id in open {
                    let reason = Some("session closed".to_string());
                    self.pilot_to(t, tx, &id, PilotState::Canceled, reason, None);
                }
                let units: Vec<String> = t
                    .units
                    .iter()
                    .filter(|(_, u)| !u.state.is_terminal())
                    .map(|(k, _)| k.clone())
                    .collect();
                for id in units {
                    let p = payload(&[("reason", "session closed".into())]);
                    self.unit_to(t, tx, &id, None, UnitState::Canceled, "umgr", p, None);
                }
                tx.stop = true;
                tx.replies.push(reply);
            }
            CoordMsg::PilotUpdate {
                pilot,
                to,
                handle,
                reason,
            } => self.pilot_to(t, tx, &pilot, to, reason, handle),
            CoordMsg::Assign { unit, pilot } => self.assign(t, tx, &unit, &pilot),
            CoordMsg::Unschedulable { unit, reason } => {
                let p = payload(&[("reason", reason)]);
                self.unit_to(
                    t,
                    tx,
                    &unit,
                    Some(UnitState::UmgrScheduling),
                    UnitState::Failed,
                    "umgr.scheduler",
                    p,
                    None,
                );
            }
            CoordMsg::Staged {
                unit,
                pilot,
                input_staging,
                sandbox,
            } => {
                let Some(u) = t.units.get_mut(&unit) else { return };
                if u.state != UnitState::UmgrStagingInput || t.assigned.get(&unit) != Some(&pilot) {
                    return;
                }
                u.description.input_staging = input_staging;
                u.sandbox = Some(sandbox);
                u.pilot_id = Some(pilot.clone());
                let p = payload(&[("pilot", pilot.clone())]);
                if self.unit_to(
                    t,
                    tx,
                    &unit,
                    None,
                    UnitState::AgentStagingInput,
                    "umgr.stager_input",
                    p,
                    None,
                ) {
                    tx.inbox.entry(pilot).or_default().push(t.units[&unit].clone());
                }
            }
            CoordMsg::StageFailed { unit, reason } => {
                let p = payload(&[("reason", reason)]);
                self.unit_to(
                    t,
                    tx,
                    &unit,
                    Some(UnitState::UmgrStagingInput),
                    UnitState::Failed,
                    "umgr.stager_input",
                    p,
                    None,
                );
            }
        }
    }

    fn assign(&mut self, t: &mut Tables, tx: &mut Tx, unit: &str, pilot: &str) {
        let (Some(u), Some(umgr)) = (t.units.get(unit), t.owner.get(unit).cloned()) else {
            return;
        };
        let (cores, gpus, state) = (u.description.cores, u.description.gpus, u.state);
        let release = SchedMsg::Release {
            pilot: pilot.into(),
            cores,
        };
        if state != UnitState::UmgrScheduling {
            // A duplicate decision from a restarted scheduler.
            tx.sched.push((umgr, release));
            return;
        }
        if t.pilots.get(pilot).map(|p| p.state) != Some(PilotState::Active) {
            // The pilot ended after the decision; decide again.
            tx.sched.push((umgr.clone(), release));
            let again = PendingUnit {
                unit: unit.into(),
                cores,
                gpus,
            };
            tx.sched.push((umgr, SchedMsg::Schedule(vec![again])));
            return;
        }
        t.assigned.insert(unit.into(), pilot.into());
        let p = payload(&[("pilot", pilot.into())]);
        if self.unit_to(
            t,
            tx,
            unit,
            None,
            UnitState::UmgrStagingInput,
            "umgr.scheduler",
            p,
            None,
        ) {
            tx.stage.push(StageMsg {
                unit: t.units[unit].clone(),
                pilot: pilot.into(),
            });
        }
    }

    fn resync(&mut self, t: &mut Tables, tx: &mut Tx, component: &Component) {
        match component {
            Component::Launcher => {
                for (id, p) in &t.pilots {
                    if p.state.is_terminal() {
                        continue;
                    }
                    let Some(config) = self.configs.get(id) else { continue };
                    match &p.job_handle {
                        Some(h) => tx.launch.push(LaunchMsg::Track {
                            pilot: id.clone(),
                            resource: config.name.clone(),
                            handle: h.clone(),
                            state: if p.state == PilotState::Active {
                                PilotState::Active
                            } else {
                                PilotState::Queued
                            },
                        }),
                        None => tx.launch.push(LaunchMsg::Launch {
                            pilot: p.clone(),
                            config: Box::new(config.clone()),
                        }),
                    }
                }
            }
            Component::Scheduler(umgr) => {
                for id in t.attached.get(umgr).into_iter().flatten() {
                    if let Some(p) = t.pilots.get(id) {
                        tx.sched.push((umgr.clone(), attach_msg(p)));
                    }
                }
                let mut pending = Vec::new();
                for (id, _) in t.owner.iter().filter(|(_, m)| *m == umgr) {
                    let u = &t.units[id];
                    if u.state.is_terminal() {
                        continue;
                    }
                    if let Some(pilot) = t.assigned.get(id) {
                        tx.sched.push((
                            umgr.clone(),
                            SchedMsg::Claim {
                                pilot: pilot.clone(),
                                cores: u.description.cores,
                            },
                        ));
                    } else if u.state == UnitState::UmgrScheduling {
                        pending.push(PendingUnit {
                            unit: id.clone(),
                            cores: u.description.cores,
                            gpus: u.description.gpus,
                        });
                    }
                }
                if !pending.is_empty() {
                    tx.sched.push((umgr.clone(), SchedMsg::Schedule(pending)));
                }
            }
            Component::StagerInput => {
                for (id, u) in &t.units {
                    if u.state == UnitState::UmgrStagingInput {
                        if let Some(pilot) = t.assigned.get(id) {
                            tx.stage.push(StageMsg {
                                unit: u.clone(),
                                pilot: pilot.clone(),
                            });
                        }
                    }
                }
            }
        }
    }

    /// Applies one unit transition. With `from` set, the update is dropped
    /// unless the unit is still in that state. An illegal edge fails the unit.
    #[allow(clippy::too_many_arguments)]
    fn unit_to(
        &mut self,
        t: &mut Tables,
        tx: &mut Tx,
        id: &str,
        from: Option<UnitState>,
        to: UnitState,
        component: &str,
        mut payload: BTreeMap<String, String>,
        ts: Option<Timestamp>,
    ) -> bool {
        let Some(u) = t.units.get_mut(id) else { return false };
        if from.is_some_and(|f| f != u.state) || u.state.is_terminal() {
            log::debug!("stale update for {id}: {:?} -> {to}", u.state);
            return false;
        }
        let to = match transition(u.state, to) {
            Ok(s) => s,
            Err(e) => {
                payload = BTreeMap::from([("reason".to_string(), e.to_string())]);
                UnitState::Failed
            }
        };
        u.state = to;
        if to.is_terminal() {
            if let Some(c) = payload.get("exit_code").and_then(|c| c.parse().ok()) {
                u.exit_code = Some(c);
            }
        }
        let cores = u.description.cores;
        let mut ev = Event::new(
            ts.unwrap_or_else(clock::now),
            EntityKind::Unit,
            id,
            to.name(),
            component,
        );
        ev.payload = payload;
        tx.events.push(ev);
        if to.is_terminal() {
            let umgr = t.owner.get(id).cloned().unwrap_or_default();
            if let Some(pilot) = t.assigned.get(id) {
                tx.sched.push((
                    umgr.clone(),
                    SchedMsg::Release {
                        pilot: pilot.clone(),
                        cores,
                    },
                ));
            }
            tx.completed.push((umgr, t.units[id].clone()));
        }
        true
    }

    fn pilot_to(
        &mut self,
        t: &mut Tables,
        tx: &mut Tx,
        id: &str,
        to: PilotState,
        reason: Option<String>,
        handle: Option<pilotkit_core::model::JobHandle>,
    ) {
        let Some(p) = t.pilots.get_mut(id) else { return };
        if p.state == to || p.state.is_terminal() {
            return;
        }
        let mut payload = BTreeMap::from([("cores".to_string(), p.description.cores.to_string())]);
        let to = match transition(p.state, to) {
            Ok(s) => {
                if let Some(r) = reason {
                    payload.insert("reason".into(), r);
                }
                s
            }
            Err(e) => {
                payload.insert("reason".into(), e.to_string());
                PilotState::Failed
            }
        };
        p.state = to;
        if let Some(h) = handle {
            payload.insert("job_id".into(), h.job_id.clone());
            p.job_handle = Some(h);
        }
        if to == PilotState::Active {
            if let Some(c) = self.configs.get(id) {
                let cpn = c.cores_per_node.max(1);
                p.slot_table_snapshot = Some(SlotSummary {
                    nodes: p.description.cores.div_ceil(cpn),
                    cores: p.description.cores,
                    gpus: p.description.gpus,
                });
            }
        }
        let mut ev = Event::new(clock::now(), EntityKind::Pilot, id, to.name(), "pmgr.launcher");
        ev.payload = payload;
        tx.events.push(ev);
        for (umgr, pilots) in &t.attached {
            if pilots.iter().any(|p| p == id) {
                tx.sched.push((
                    umgr.clone(),
                    SchedMsg::PilotState {
                        pilot: id.into(),
                        state: to,
                    },
                ));
            }
        }
        if to.is_terminal() {
            let (unit_state, why) = match to {
                PilotState::Failed => (UnitState::Failed, format!("pilot {id} FAILED")),
                _ => (UnitState::Canceled, format!("pilot {id} {to}")),
            };
            let orphans: Vec<String> = t
                .assigned
                .iter()
                .filter(|(u, p)| p.as_str() == id && !t.units[*u].state.is_terminal())
                .map(|(u, _)| u.clone())
                .collect();
            for u in orphans {
                let p = payload_reason(&why);
                self.unit_to(t, tx, &u, None, unit_state, "pmgr.launcher", p, None);
            }
        }
    }
}

fn payload_reason(why: &str) -> BTreeMap<String, String> {
    BTreeMap::from([("reason".to_string(), why.to_string())])
}

fn attach_msg(p: &pilotkit_core::Pilot) -> SchedMsg {
    SchedMsg::Attach {
        pilot: p.id.clone(),
        cores: p.description.cores,
        gpus: p.description.gpus,
        state: p.state,
    }
}
