//! A simulated batch queue: seeded queue-wait sampling and a job table whose
//! state is a pure function of the clock readings it is advanced with.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Queue-wait distribution, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueueWait {
    Fixed { secs: f64 },
    Uniform { min: f64, max: f64, seed: u64 },
}

impl QueueWait {
    pub fn is_valid(&self) -> bool {
        match *self {
            QueueWait::Fixed { secs } => secs >= 0.0 && secs.is_finite(),
            QueueWait::Uniform { min, max, .. } => min >= 0.0 && max >= min && max.is_finite(),
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> QueueWait {
        match self.clone() {
            QueueWait::Uniform { min, max, .. } => QueueWait::Uniform {
                min,
                max,
                seed: new_seed,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSimConfig {
    pub queue_wait: QueueWait,
    pub max_concurrent_jobs: u32,
}

/// Draws queue waits in nanoseconds; the sequence depends only on the config.
#[derive(Debug, Clone)]
pub struct WaitSampler {
    wait: QueueWait,
    rng: ChaCha8Rng,
}

impl WaitSampler {
    pub fn new(wait: &QueueWait) -> Self {
        let seed = match wait {
            QueueWait::Uniform { seed, .. } => *seed,
            QueueWait::Fixed { .. } => 0,
        };
        WaitSampler {
            wait: wait.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_ns(&mut self) -> u64 {
        let secs = match self.wait {
            QueueWait::Fixed { secs } => secs,
            QueueWait::Uniform { min, max, .. } => {
                if max > min {
                    self.rng.gen_range(min..max)
                } else {
                    min
                }
            }
        };
        (secs * 1e9 + 0.5) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Canceled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Canceled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimJob {
    pub submitted_ns: u64,
    pub wait_ns: u64,
    pub started_ns: Option<u64>,
    pub state: JobState,
}

/// Jobs become eligible once their sampled wait has elapsed and start, in
/// submission order among the eligible ones, while fewer than
/// `max_concurrent_jobs` are running.
#[derive(Debug, Clone)]
pub struct BatchQueue {
    sampler: WaitSampler,
    max_running: usize,
    jobs: Vec<SimJob>,
}

impl BatchQueue {
    pub fn new(config: &BatchSimConfig) -> Self {
        BatchQueue {
            sampler: WaitSampler::new(&config.queue_wait),
            max_running: config.max_concurrent_jobs.max(1) as usize,
            jobs: Vec::new(),
        }
    }

    /// Adds a job and returns its index.
    pub fn submit(&mut self, now_ns: u64) -> usize {
        let wait_ns = self.sampler.next_ns();
        self.jobs.push(SimJob {
            submitted_ns: now_ns,
            wait_ns,
            started_ns: None,
            state: JobState::Pending,
        });
        self.jobs.len() - 1
    }

    pub fn job(&self, idx: usize) -> Option<&SimJob> {
        self.jobs.get(idx)
    }

    pub fn running(&self) -> usize {
        self.jobs.iter().filter(|j| j.state == JobState::Running).count()
    }

    /// Starts every job that may start at `now_ns`; returns their indices.
    pub fn advance(&mut self, now_ns: u64) -> Vec<usize> {
        let mut started = Vec::new();
        let mut running = self.running();
        for (i, job) in self.jobs.iter_mut().enumerate() {
            if running >= self.max_running {
                break;
            }
            if job.state == JobState::Pending && now_ns >= job.submitted_ns.saturating_add(job.wait_ns) {
                job.state = JobState::Running;
                job.started_ns = Some(now_ns);
                running += 1;
                started.push(i);
            }
        }
        started
    }

    /// Marks a running job finished. No effect on other states.
    pub fn finish(&mut self, idx: usize, success: bool) {
        if let Some(job) = self.jobs.get_mut(idx) {
            if job.state == JobState::Running {
                job.state = if success { JobState::Done } else { JobState::Failed };
            }
        }
    }

    /// Cancels a non-terminal job; terminal jobs keep their state.
    pub fn cancel(&mut self, idx: usize) -> Option<JobState> {
        let job = self.jobs.get_mut(idx)?;
        if !job.state.is_terminal() {
            job.state = JobState::Canceled;
        }
        Some(job.state)
    }
}
