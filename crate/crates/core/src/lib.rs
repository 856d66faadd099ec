//! Information-market directory service for mobile ad-hoc networks, built on a
//! deterministic discrete-event simulator.
//!
//! Devices move through a bounded planar world and communicate over unit-disk
//! radio links. Designated geographic regions act as information markets: items
//! published into a market are assigned, capacity-aware, to member devices by an
//! elected information market manager (IMM). The protocol layers cover market
//! join/leave, IMM election and disaster recovery, replication maintenance,
//! mobility-driven data handoff, geographic forwarding with carry-and-forward,
//! and the two query types (synchronous local, asynchronous smart remote).
//!
//! Everything runs single-threaded on a seeded event loop: an identical
//! (scenario, seed) pair always produces a byte-identical trace.

pub mod audit;
pub mod broker;
pub mod engine;
pub mod ids;
pub mod market;
pub mod metrics;
pub mod oracle;
pub mod publish;
pub mod query;
pub mod scenario;
pub mod simkernel;
pub mod trace;
pub mod transport;
pub mod world;

pub use engine::Simulation;
pub use ids::{DeviceId, ItemId, MarketId, MsgId, QueryId};
pub use scenario::Scenario;
pub use simkernel::SimTime;
