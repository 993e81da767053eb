//! Fault-tolerant pipeline-parallel inference and fine-tuning over a swarm of
//! unreliable block servers.

pub mod balancer;
pub mod bench;
pub mod client;
pub mod directory;
pub mod model;
pub mod netsim;
pub mod parallel;
pub mod router;
pub mod server;
pub mod swarm;
pub mod transport;
pub mod types;
