//! The communication mesh: queues between components, heartbeats, and the
//! persistent session store that bridges client and agents.

pub mod heartbeat;
pub mod queue;
pub mod store;

pub use heartbeat::{Beater, Heartbeat, HeartbeatMonitor};
pub use queue::{Queue, QueueError, DEFAULT_BULK};
pub use store::{CorruptRecord, LogTail, Replay, SessionStore, StoreError};
