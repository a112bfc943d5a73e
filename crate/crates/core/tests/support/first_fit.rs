//! Brute-force first-fit reference over a plain busy grid.
//!
//! Candidates are tried in a fixed order: every single node by index, then,
//! for MPI requests only, every run of consecutive nodes that all have a free
//! core, by start node and then by length. The first candidate with enough
//! free cores wins and takes the lowest free cores of each node in turn.

#![allow(dead_code)]

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// `(node, core)` pairs in node order, lowest core first.
    Placed(Vec<(usize, usize)>),
    NoFit,
    Impossible,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub busy: Vec<Vec<bool>>,
}

impl Grid {
    pub fn new(nodes: usize, cores: usize) -> Grid {
        Grid {
            busy: vec![vec![false; cores]; nodes],
        }
    }

    fn free(&self, node: usize) -> Vec<usize> {
        (0..self.busy[node].len()).filter(|&c| !self.busy[node][c]).collect()
    }

    fn impossible(&self, cores: usize, mpi: bool) -> bool {
        let widest = self.busy.iter().map(Vec::len).max().unwrap_or(0);
        let total: usize = self.busy.iter().map(Vec::len).sum();
        if mpi {
            cores > total
        } else {
            cores > widest
        }
    }

    fn candidates(&self, mpi: bool) -> Vec<Vec<usize>> {
        let n = self.busy.len();
        let mut out: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        if mpi {
            for start in 0..n {
                for end in start..n {
                    out.push((start..=end).collect());
                }
            }
        }
        out
    }

    pub fn allocate(&mut self, cores: usize, mpi: bool) -> Outcome {
        if self.impossible(cores, mpi) {
            return Outcome::Impossible;
        }
        for span in self.candidates(mpi) {
            if span.iter().any(|&i| self.free(i).is_empty()) {
                continue;
            }
            let total: usize = span.iter().map(|&i| self.free(i).len()).sum();
            if total < cores {
                continue;
            }
            let mut taken = Vec::new();
            for &i in &span {
                for c in self.free(i) {
                    if taken.len() == cores {
                        break;
                    }
                    taken.push((i, c));
                }
            }
            for &(i, c) in &taken {
                self.busy[i][c] = true;
            }
            return Outcome::Placed(taken);
        }
        Outcome::NoFit
    }

    pub fn release(&mut self, slots: &[(usize, usize)]) {
        for &(i, c) in slots {
            assert!(self.busy[i][c], "oracle released a free slot");
            self.busy[i][c] = false;
        }
    }
}
