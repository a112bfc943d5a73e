//! In-process many-producer/many-consumer queues with bulk operations.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

pub const DEFAULT_BULK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("queue {0} is closed")]
    Closed(String),
    #[error("empty bulk put on queue {0}")]
    EmptyBulk(String),
    #[error("max_n must be at least 1")]
    ZeroMax,
}

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
}

struct Shared<T> {
    name: String,
    capacity: Option<usize>,
    state: Mutex<State<T>>,
    readable: Condvar,
    writable: Condvar,
}

/// Each message goes to exactly one consumer. A bulk is enqueued atomically,
/// so no other producer's messages interleave with it.
pub struct Queue<T> {
    shared: Arc<Shared<T>>,
}

impl<T> Clone for Queue<T> {
    fn clone(&self) -> Self {
        Queue {
            shared: Arc::clone(&self.shared),
        }
    }
}

impl<T> std::fmt::Debug for Queue<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Queue").field("name", &self.shared.name).finish()
    }
}

impl<T> Queue<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self::build(name.into(), None)
    }

    /// A queue holding at most `capacity` messages; bulk puts wait for room.
    pub fn bounded(name: impl Into<String>, capacity: usize) -> Self {
        Self::build(name.into(), Some(capacity.max(1)))
    }

    fn build(name: String, capacity: Option<usize>) -> Self {
        Queue {
            shared: Arc::new(Shared {
                name,
                capacity,
                state: Mutex::new(State {
                    items: VecDeque::new(),
                    closed: false,
                }),
                readable: Condvar::new(),
                writable: Condvar::new(),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.shared.name
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        // A panicking holder cannot leave the deque half-updated.
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn closed_err(&self) -> QueueError {
        QueueError::Closed(self.shared.name.clone())
    }

    pub fn put_bulk(&self, messages: Vec<T>) -> Result<usize, QueueError> {
        if messages.is_empty() {
            return Err(QueueError::EmptyBulk(self.shared.name.clone()));
        }
        let n = messages.len();
        let mut st = self.lock();
        if let Some(cap) = self.shared.capacity {
            // An oversized bulk waits for an empty queue rather than forever.
            while !st.closed && !st.items.is_empty() && st.items.len() + n > cap {
                st = self.shared.writable.wait(st).unwrap_or_else(|e| e.into_inner());
            }
        }
        if st.closed {
            return Err(self.closed_err());
        }
        st.items.extend(messages);
        drop(st);
        if n == 1 {
            self.shared.readable.notify_one();
        } else {
            self.shared.readable.notify_all();
        }
        Ok(n)
    }

    pub fn put(&self, message: T) -> Result<(), QueueError> {
        self.put_bulk(vec![message]).map(|_| ())
    }

    /// Up to `max_n` messages; empty after `timeout` with nothing available.
    /// Fails only once the queue is closed and drained.
    pub fn get_bulk(&self, max_n: usize, timeout: Duration) -> Result<Vec<T>, QueueError> {
        if max_n == 0 {
            return Err(QueueError::ZeroMax);
        }
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if !st.items.is_empty() {
                let k = max_n.min(st.items.len());
                let out: Vec<T> = st.items.drain(..k).collect();
                let more = !st.items.is_empty();
                drop(st);
                self.shared.writable.notify_all();
                if more {
                    self.shared.readable.notify_one();
                }
                return Ok(out);
            }
            if st.closed {
                return Err(self.closed_err());
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            st = self
                .shared
                .readable
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn try_get_bulk(&self, max_n: usize) -> Result<Vec<T>, QueueError> {
        self.get_bulk(max_n, Duration::ZERO)
    }

    /// Stops accepting messages; consumers still receive what is queued.
    pub fn close(&self) {
        self.lock().closed = true;
        self.shared.readable.notify_all();
        self.shared.writable.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Removes and returns everything queued.
    pub fn drain(&self) -> Vec<T> {
        let out: Vec<T> = self.lock().items.drain(..).collect();
        self.shared.writable.notify_all();
        out
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bulk_order_and_batching() {
        let q = Queue::new("t");
        assert_eq!(q.put_bulk((0..10).collect()).unwrap(), 10);
        let sizes: Vec<usize> = (0..3).map(|_| q.get_bulk(4, Duration::ZERO).unwrap().len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        q.put_bulk((0..128).collect()).unwrap();
        assert_eq!(
            q.get_bulk(DEFAULT_BULK, Duration::ZERO).unwrap(),
            (0..128).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_bulk_and_closed() {
        let q: Queue<u32> = Queue::new("t");
        assert_eq!(q.put_bulk(vec![]), Err(QueueError::EmptyBulk("t".into())));
        q.put(1).unwrap();
        q.close();
        assert_eq!(q.put(2), Err(QueueError::Closed("t".into())));
        assert_eq!(q.get_bulk(8, Duration::ZERO).unwrap(), [1]);
        assert_eq!(q.get_bulk(8, Duration::ZERO), Err(QueueError::Closed("t".into())));
        assert_eq!(q.get_bulk(0, Duration::ZERO), Err(QueueError::ZeroMax));
    }

    #[test]
    fn timeout_on_empty() {
        let q: Queue<u32> = Queue::new("t");
        let t0 = Instant::now();
        assert!(q.get_bulk(1, Duration::from_millis(10)).unwrap().is_empty());
        assert!(t0.elapsed() >= Duration::from_millis(10));
    }

    #[test]
    fn bounded_put_waits_for_room() {
        let q = Queue::bounded("b", 2);
        q.put_bulk(vec![1, 2]).unwrap();
        let q2 = q.clone();
        let h = std::thread::spawn(move || q2.put(3).unwrap());
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(q.len(), 2);
        assert_eq!(q.get_bulk(1, Duration::ZERO).unwrap(), [1]);
        h.join().unwrap();
        assert_eq!(q.drain(), [2, 3]);
    }
}
