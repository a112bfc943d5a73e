//! The WFProcessor and TaskManager workers. Neither keeps state beyond the
//! messages it is holding; both may be killed at any point.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{AppMsg, EnsembleComponent};
use crate::client::UnitManager;
use crate::mesh::{Beater, Heartbeat, Queue, QueueError, DEFAULT_BULK};
use pilotkit_core::workflow::{translate_task, Task};
use pilotkit_core::{Unit, UnitState};

const POLL: Duration = Duration::from_millis(5);

/// Queues shared by the AppManager and every worker instance.
pub(crate) struct Wiring {
    pub inbox: Queue<AppMsg>,
    pub heartbeats: Queue<Heartbeat>,
    /// Ready tasks, AppManager to WFProcessor.
    pub to_wfp: Queue<Task>,
    /// Tasks to submit, WFProcessor to TaskManager.
    pub to_tm: Queue<Task>,
    /// Task outcomes, TaskManager to WFProcessor.
    pub completed: Queue<AppMsg>,
    /// Terminal units from the runtime.
    pub unit_done: Queue<Unit>,
    pub umgr: Arc<UnitManager>,
    pub interval: Duration,
}

pub(crate) struct Instance {
    kill: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Instance {
    pub fn kill(&mut self) {
        self.kill.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Per-instance bookkeeping: liveness, kill flag and the injected fault.
struct Life {
    beater: Beater,
    heartbeats: Queue<Heartbeat>,
    interval: Duration,
    last: Option<Instant>,
    kill: Arc<AtomicBool>,
    budget: Option<usize>,
    handled: usize,
}

impl Life {
    fn alive(&mut self) -> bool {
        if self.kill.load(Ordering::SeqCst) {
            return false;
        }
        if self.last.is_none_or(|t| t.elapsed() >= self.interval) {
            self.last = Some(Instant::now());
            let _ = self.heartbeats.put(self.beater.beat());
        }
        true
    }

    /// Messages this instance may still handle before its injected crash.
    fn allowance(&self) -> usize {
        self.budget.map_or(usize::MAX, |b| b.saturating_sub(self.handled))
    }
}

fn spawn(
    c: EnsembleComponent,
    w: &Wiring,
    budget: Option<usize>,
    mut step: impl FnMut(&mut Life) -> Result<bool, QueueError> + Send + 'static,
) -> std::io::Result<Instance> {
    let kill = Arc::new(AtomicBool::new(false));
    let mut life = Life {
        beater: Beater::new(c.name()),
        heartbeats: w.heartbeats.clone(),
        interval: w.interval,
        last: None,
        kill: Arc::clone(&kill),
        budget,
        handled: 0,
    };
    let handle = thread::Builder::new().name(c.name().into()).spawn(move || {
        while life.alive() {
            match step(&mut life) {
                Ok(true) => {}
                Ok(false) => {
                    log::info!("{} crashed after {} messages", c, life.handled);
                    return;
                }
                Err(_) => return,
            }
        }
    })?;
    Ok(Instance {
        kill,
        handle: Some(handle),
    })
}

/// Enqueuer and dequeuer: ready tasks go to the TaskManager, outcomes go to
/// the AppManager.
pub(crate) fn spawn_wfprocessor(w: &Wiring, budget: Option<usize>) -> std::io::Result<Instance> {
    let (to_wfp, to_tm, completed, inbox) = (w.to_wfp.clone(), w.to_tm.clone(), w.completed.clone(), w.inbox.clone());
    spawn(EnsembleComponent::WfProcessor, w, budget, move |life| {
        let tasks = to_wfp.try_get_bulk(DEFAULT_BULK)?;
        let fits = tasks.len() <= life.allowance();
        let keep: Vec<Task> = tasks.into_iter().take(life.allowance()).collect();
        life.handled += keep.len();
        if !keep.is_empty() {
            to_tm.put_bulk(keep)?;
        }
        if !fits {
            return Ok(false);
        }
        let outcomes = completed.get_bulk(DEFAULT_BULK, POLL)?;
        let fits = outcomes.len() <= life.allowance();
        let keep: Vec<AppMsg> = outcomes.into_iter().take(life.allowance()).collect();
        life.handled += keep.len();
        if !keep.is_empty() {
            inbox.put_bulk(keep)?;
        }
        Ok(fits)
    })
}

/// Submits tasks as units and turns terminal units into task outcomes.
pub(crate) fn spawn_taskmanager(w: &Wiring, budget: Option<usize>) -> std::io::Result<Instance> {
    let (to_tm, unit_done, completed, inbox) = (
        w.to_tm.clone(),
        w.unit_done.clone(),
        w.completed.clone(),
        w.inbox.clone(),
    );
    let umgr = Arc::clone(&w.umgr);
    spawn(EnsembleComponent::TaskManager, w, budget, move |life| {
        let tasks = to_tm.try_get_bulk(DEFAULT_BULK)?;
        if !tasks.is_empty() {
            // A crash lands between the runtime accepting the fatal task and
            // this bulk being confirmed.
            let crash = tasks.len() > life.allowance();
            let take = if crash { life.allowance() + 1 } else { tasks.len() };
            let mut reports = Vec::new();
            let mut cuds = Vec::new();
            let mut uids = Vec::new();
            for t in tasks.into_iter().take(take) {
                match translate_task(&t) {
                    Ok(cud) => {
                        uids.push(t.uid);
                        cuds.push(cud);
                    }
                    Err(e) => reports.push(AppMsg::Rejected {
                        uid: t.uid,
                        reason: e.to_string(),
                    }),
                }
            }
            let results = match umgr.submit_units(cuds) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("taskmanager: submit failed: {e}");
                    return Ok(false);
                }
            };
            if crash {
                life.handled += take;
                return Ok(false);
            }
            for (uid, r) in uids.into_iter().zip(results) {
                reports.push(match r {
                    Ok(u) => AppMsg::Submitted { uid, unit: u.id },
                    Err(e) => AppMsg::Rejected {
                        uid,
                        reason: e.to_string(),
                    },
                });
            }
            life.handled += take;
            inbox.put_bulk(reports)?;
        }
        let units = unit_done.get_bulk(DEFAULT_BULK, POLL)?;
        let fits = units.len() <= life.allowance();
        let keep: Vec<AppMsg> = units
            .into_iter()
            .take(life.allowance())
            .filter_map(|u| {
                let uid = u.description.name?;
                Some(AppMsg::Outcome {
                    uid,
                    unit: u.id,
                    success: u.state == UnitState::Done,
                })
            })
            .collect();
        life.handled += keep.len();
        if !keep.is_empty() {
            completed.put_bulk(keep)?;
        }
        Ok(fits)
    })
}
