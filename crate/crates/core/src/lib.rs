//! Discrete-event network simulator with programmable match-action switches.
//!
//! The crate is layered bottom-up:
//!
//! - [`sim`]: virtual clock, event scheduler, seeded randomness
//! - [`packet`]: wire formats, custom header defs, the parsed header stack
//! - [`pipeline`]: match-action tables, actions, the two-stage program
//! - [`switch`]: virtual output queues, token-bucket pacing, the poll loop
//! - [`netdev`]: links, hosts, traffic applications
//! - [`stats`]: counters, time series, the event trace
//! - [`scenario`] / [`net`]: topology description and the assembled network
//! - [`generate`]: built-in example scenario generators

pub mod generate;
pub mod net;
pub mod netdev;
pub mod packet;
pub mod pipeline;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod switch;
