//! A Byzantine fault tolerant replicated hash table on a Chord ring, run
//! inside a deterministic discrete-event simulator.
//!
//! Every uid is stored at `r = 3f+1` evenly spaced points of the circle.
//! Writes go through a per-uid consensus among those replicas, reads accept
//! a value once `f+1` replicas agree on it, and lost ranges are rebuilt from
//! the surviving peers. The [`harness`] drives whole scenarios from TOML
//! files and checks each run against independent oracles.
//!
//! - [`keyspace`]: modular key arithmetic and replica placement.
//! - [`simnet`]: the simulator, fault injection and the trace.
//! - [`overlay`]: Chord routing, stabilization and lookups.
//! - [`dht`]: replica store, put consensus and the service protocol.
//! - [`client`]: the quorum client.
//! - [`recovery`]: range repair after joins and failures.

pub mod client;
pub mod dht;
pub mod harness;
pub mod keyspace;
pub mod node;
pub mod overlay;
pub mod protocol;
pub mod recovery;
pub mod simnet;
