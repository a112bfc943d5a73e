//! The agent's slot table and first-fit placement.
//!
//! Placement rules:
//! - a request that fits on one node goes to the lowest-index node with enough
//!   free cores and gpus, taking that node's lowest-index free slots;
//! - otherwise an MPI request may spill over a run of consecutive nodes that
//!   each have at least one free core, starting at the lowest feasible node and
//!   using the shortest such run; every node in the run gives its lowest free
//!   slots, the last one only what is still missing;
//! - non-MPI requests never span nodes.
//!
//! A request that can never fit (more than the whole table, or a non-MPI
//! request larger than every node) is [`AllocError::Impossible`]; one that
//! cannot fit right now is [`AllocError::NoFit`] and leaves the table unchanged.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SlotState {
    Free,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub cores: Vec<SlotState>,
    pub gpus: Vec<SlotState>,
}

impl Node {
    pub fn new(name: impl Into<String>, cores: usize, gpus: usize) -> Self {
        Node {
            name: name.into(),
            cores: alloc::vec![SlotState::Free; cores],
            gpus: alloc::vec![SlotState::Free; gpus],
        }
    }

    pub fn free_cores(&self) -> usize {
        self.cores.iter().filter(|s| **s == SlotState::Free).count()
    }

    pub fn free_gpus(&self) -> usize {
        self.gpus.iter().filter(|s| **s == SlotState::Free).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Request {
    pub cores: u32,
    pub gpus: u32,
    pub mpi: bool,
}

impl Request {
    pub fn new(cores: u32, gpus: u32, mpi: bool) -> Self {
        Request { cores, gpus, mpi }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node: String,
    pub node_index: usize,
    pub cores: Vec<usize>,
    pub gpus: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub unit_id: String,
    pub node_assignments: Vec<NodeAssignment>,
}

impl Placement {
    pub fn cores(&self) -> usize {
        self.node_assignments.iter().map(|a| a.cores.len()).sum()
    }

    pub fn gpus(&self) -> usize {
        self.node_assignments.iter().map(|a| a.gpus.len()).sum()
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.node_assignments.iter().map(|a| a.node.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("no free slots fit the request right now")]
    NoFit,
    #[error("request can never fit this slot table")]
    Impossible,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("placement of {unit_id} is not held")]
pub struct DoubleRelease {
    pub unit_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTable {
    pub nodes: Vec<Node>,
}

fn lowest_free(slots: &[SlotState], n: usize) -> Vec<usize> {
    slots
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == SlotState::Free)
        .map(|(i, _)| i)
        .take(n)
        .collect()
}

impl SlotTable {
    /// `nodes` identical nodes.
    pub fn uniform(nodes: usize, cores_per_node: usize, gpus_per_node: usize) -> Self {
        SlotTable {
            nodes: (0..nodes)
                .map(|i| Node::new(format!("node{i:04}"), cores_per_node, gpus_per_node))
                .collect(),
        }
    }

    /// Just enough nodes for `cores` total cores; the last node may be partial.
    /// Gpus are handed out `gpus_per_node` at a time until `gpus` is reached.
    pub fn for_pilot(cores: usize, gpus: usize, cores_per_node: usize, gpus_per_node: usize) -> Self {
        let cpn = cores_per_node.max(1);
        let nodes = cores.div_ceil(cpn).max(1);
        let mut left_c = cores;
        let mut left_g = gpus;
        let nodes = (0..nodes)
            .map(|i| {
                let c = left_c.min(cpn);
                let g = left_g.min(gpus_per_node);
                left_c -= c;
                left_g -= g;
                Node::new(format!("node{i:04}"), c, g)
            })
            .collect();
        SlotTable { nodes }
    }

    pub fn total_cores(&self) -> usize {
        self.nodes.iter().map(|n| n.cores.len()).sum()
    }

    pub fn total_gpus(&self) -> usize {
        self.nodes.iter().map(|n| n.gpus.len()).sum()
    }

    pub fn busy_cores(&self) -> usize {
        self.total_cores() - self.nodes.iter().map(Node::free_cores).sum::<usize>()
    }

    pub fn busy_gpus(&self) -> usize {
        self.total_gpus() - self.nodes.iter().map(Node::free_gpus).sum::<usize>()
    }

    /// Whether `req` could ever be satisfied by an empty table of this shape.
    pub fn can_ever_fit(&self, req: &Request) -> bool {
        let (c, g) = (req.cores as usize, req.gpus as usize);
        if c > self.total_cores() || g > self.total_gpus() {
            return false;
        }
        if req.mpi {
            // Spill only covers runs of nodes with at least one core.
            let (mut run_c, mut run_g) = (0, 0);
            for n in &self.nodes {
                if n.cores.is_empty() {
                    run_c = 0;
                    run_g = 0;
                    continue;
                }
                run_c += n.cores.len();
                run_g += n.gpus.len();
                if run_c >= c && run_g >= g {
                    return true;
                }
            }
        }
        self.nodes.iter().any(|n| n.cores.len() >= c && n.gpus.len() >= g)
    }

    fn find(&self, req: &Request) -> Option<Vec<NodeAssignment>> {
        let (c, g) = (req.cores as usize, req.gpus as usize);
        if let Some((i, n)) = self
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.free_cores() >= c && n.free_gpus() >= g)
        {
            return Some(alloc::vec![NodeAssignment {
                node: n.name.clone(),
                node_index: i,
                cores: lowest_free(&n.cores, c),
                gpus: lowest_free(&n.gpus, g),
            }]);
        }
        if !req.mpi {
            return None;
        }
        for start in 0..self.nodes.len() {
            if self.nodes[start].free_cores() == 0 {
                continue;
            }
            let (mut acc_c, mut acc_g) = (0, 0);
            for end in start..self.nodes.len() {
                let n = &self.nodes[end];
                if n.free_cores() == 0 {
                    break;
                }
                acc_c += n.free_cores();
                acc_g += n.free_gpus();
                if acc_c >= c && acc_g >= g {
                    let (mut need_c, mut need_g) = (c, g);
                    let mut out = Vec::new();
                    for (i, n) in self.nodes.iter().enumerate().take(end + 1).skip(start) {
                        let cores = lowest_free(&n.cores, need_c);
                        let gpus = lowest_free(&n.gpus, need_g);
                        need_c -= cores.len();
                        need_g -= gpus.len();
                        out.push(NodeAssignment {
                            node: n.name.clone(),
                            node_index: i,
                            cores,
                            gpus,
                        });
                    }
                    return Some(out);
                }
            }
        }
        None
    }

    /// First-fit allocation; on success every returned slot is BUSY.
    pub fn allocate(&mut self, unit_id: &str, req: &Request) -> Result<Placement, AllocError> {
        if !self.can_ever_fit(req) {
            return Err(AllocError::Impossible);
        }
        let assignments = self.find(req).ok_or(AllocError::NoFit)?;
        for a in &assignments {
            let node = &mut self.nodes[a.node_index];
            for &i in &a.cores {
                node.cores[i] = SlotState::Busy;
            }
            for &i in &a.gpus {
                node.gpus[i] = SlotState::Busy;
            }
        }
        Ok(Placement {
            unit_id: unit_id.into(),
            node_assignments: assignments,
        })
    }

    /// Frees every slot of `p`. Fails without touching the table if any of
    /// them is already free.
    pub fn release(&mut self, p: &Placement) -> Result<(), DoubleRelease> {
        let held = p.node_assignments.iter().all(|a| {
            self.nodes.get(a.node_index).is_some_and(|n| {
                a.cores.iter().all(|&i| n.cores.get(i) == Some(&SlotState::Busy))
                    && a.gpus.iter().all(|&i| n.gpus.get(i) == Some(&SlotState::Busy))
            })
        });
        if !held {
            return Err(DoubleRelease {
                unit_id: p.unit_id.clone(),
            });
        }
        for a in &p.node_assignments {
            let node = &mut self.nodes[a.node_index];
            for &i in &a.cores {
                node.cores[i] = SlotState::Free;
            }
            for &i in &a.gpus {
                node.gpus[i] = SlotState::Free;
            }
        }
        Ok(())
    }
}

/// Outcome of submitting a unit to the [`SlotScheduler`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submitted {
    Placed(Placement),
    Waiting,
}

/// Owns a slot table, the placements held on it and a FIFO of units that did
/// not fit yet. After every release the waiting units are retried in arrival
/// order; each one that fits is placed, the rest keep their position.
#[derive(Debug, Clone)]
pub struct SlotScheduler {
    table: SlotTable,
    held: BTreeMap<String, Placement>,
    waiting: VecDeque<(String, Request)>,
}

impl SlotScheduler {
    pub fn new(table: SlotTable) -> Self {
        SlotScheduler {
            table,
            held: BTreeMap::new(),
            waiting: VecDeque::new(),
        }
    }

    pub fn table(&self) -> &SlotTable {
        &self.table
    }

    pub fn held(&self) -> impl Iterator<Item = &Placement> {
        self.held.values()
    }

    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }

    pub fn submit(&mut self, unit_id: &str, req: Request) -> Result<Submitted, AllocError> {
        match self.table.allocate(unit_id, &req) {
            Ok(p) => {
                self.held.insert(unit_id.into(), p.clone());
                Ok(Submitted::Placed(p))
            }
            Err(AllocError::NoFit) => {
                self.waiting.push_back((unit_id.into(), req));
                Ok(Submitted::Waiting)
            }
            Err(e) => Err(e),
        }
    }

    /// Releases the placement held by `unit_id` and returns the waiting units
    /// placed as a consequence, in placement order.
    pub fn release(&mut self, unit_id: &str) -> Result<Vec<Placement>, DoubleRelease> {
        let p = self.held.remove(unit_id).ok_or_else(|| DoubleRelease {
            unit_id: unit_id.into(),
        })?;
        self.table.release(&p)?;
        Ok(self.retry_waiting())
    }

    /// Drops a unit that is still waiting; returns whether it was found.
    pub fn withdraw(&mut self, unit_id: &str) -> bool {
        let before = self.waiting.len();
        self.waiting.retain(|(id, _)| id != unit_id);
        before != self.waiting.len()
    }

    fn retry_waiting(&mut self) -> Vec<Placement> {
        let mut placed = Vec::new();
        let mut still = VecDeque::with_capacity(self.waiting.len());
        while let Some((id, req)) = self.waiting.pop_front() {
            // Every request needs at least one core.
            if self.table.busy_cores() == self.table.total_cores() {
                still.push_back((id, req));
                still.extend(self.waiting.drain(..));
                break;
            }
            match self.table.allocate(&id, &req) {
                Ok(p) => {
                    self.held.insert(id, p.clone());
                    placed.push(p);
                }
                Err(_) => still.push_back((id, req)),
            }
        }
        self.waiting = still;
        placed
    }

    /// BUSY cores in the table equal the cores of held placements and never
    /// exceed the table size.
    pub fn is_conserved(&self) -> bool {
        let held_c: usize = self.held.values().map(Placement::cores).sum();
        let held_g: usize = self.held.values().map(Placement::gpus).sum();
        held_c == self.table.busy_cores() && held_g == self.table.busy_gpus() && held_c <= self.table.total_cores()
    }
}
