//! Pilot-job runtime on top of `pilotkit-core`: the session store and queues,
//! resource backends, the per-pilot agent, the client managers, the ensemble
//! engine and post-mortem profiling.

pub mod agent;
pub mod backend;
pub mod bridge;
pub mod cli;
pub mod client;
pub mod clock;
pub mod ensemble;
pub mod mesh;
pub mod profiling;
pub mod report;
pub mod workload;
