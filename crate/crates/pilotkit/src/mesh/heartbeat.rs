//! Component liveness.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock;
use pilotkit_core::Timestamp;

pub const DEFAULT_INTERVAL: Duration = Duration::from_secs(1);
pub const LOSS_THRESHOLD: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub component: String,
    pub sequence: u64,
    pub timestamp: Timestamp,
}

/// Produces a component's heartbeats with strictly increasing sequence numbers.
#[derive(Debug)]
pub struct Beater {
    component: String,
    sequence: u64,
}

impl Beater {
    pub fn new(component: impl Into<String>) -> Self {
        Beater {
            component: component.into(),
            sequence: 0,
        }
    }

    pub fn beat(&mut self) -> Heartbeat {
        self.sequence += 1;
        Heartbeat {
            component: self.component.clone(),
            sequence: self.sequence,
            timestamp: clock::now(),
        }
    }
}

#[derive(Debug)]
struct Watch {
    sequence: u64,
    seen: Instant,
}

/// Tracks registered components and reports those silent for more than
/// `threshold` intervals. A lost component is reported once and forgotten.
#[derive(Debug)]
pub struct HeartbeatMonitor {
    interval: Duration,
    threshold: u32,
    watched: BTreeMap<String, Watch>,
}

impl HeartbeatMonitor {
    pub fn new(interval: Duration) -> Self {
        HeartbeatMonitor {
            interval,
            threshold: LOSS_THRESHOLD,
            watched: BTreeMap::new(),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Starts watching `component` as if it had just beaten.
    pub fn register(&mut self, component: &str, now: Instant) {
        self.watched.insert(component.into(), Watch { sequence: 0, seen: now });
    }

    pub fn forget(&mut self, component: &str) {
        self.watched.remove(component);
    }

    /// Records a beat; stale or out-of-order sequence numbers are ignored, as
    /// are beats from components not being watched.
    pub fn observe(&mut self, hb: &Heartbeat, now: Instant) {
        if let Some(w) = self.watched.get_mut(&hb.component) {
            if hb.sequence > w.sequence {
                w.sequence = hb.sequence;
                w.seen = now;
            }
        }
    }

    pub fn lost(&mut self, now: Instant) -> Vec<String> {
        let limit = self.interval * self.threshold;
        let lost: Vec<String> = self
            .watched
            .iter()
            .filter(|(_, w)| now.duration_since(w.seen) > limit)
            .map(|(c, _)| c.clone())
            .collect();
        for c in &lost {
            self.watched.remove(c);
        }
        lost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_increases() {
        let mut b = Beater::new("x");
        let s: Vec<u64> = (0..3).map(|_| b.beat().sequence).collect();
        assert_eq!(s, [1, 2, 3]);
    }

    #[test]
    fn loss_after_three_intervals() {
        let t0 = Instant::now();
        let ms = Duration::from_millis;
        let mut m = HeartbeatMonitor::new(ms(100));
        m.register("a", t0);
        m.register("b", t0);
        let mut beater = Beater::new("b");
        m.observe(&beater.beat(), t0 + ms(250));
        assert!(m.lost(t0 + ms(300)).is_empty());
        assert_eq!(m.lost(t0 + ms(301)), ["a"]);
        assert!(m.lost(t0 + ms(400)).is_empty());
        // A replayed old beat does not refresh liveness.
        let mut old = beater.beat();
        m.observe(&old, t0 + ms(500));
        old.sequence = 1;
        m.observe(&old, t0 + ms(700));
        assert_eq!(m.lost(t0 + ms(801)), ["b"]);
    }
}
