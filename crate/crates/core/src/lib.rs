//! Static heterogeneous taskflow compiler and multi-rank discrete-event
//! simulator for MoE-FFN scheduling.

pub mod builders;
pub mod compile;
pub mod error;
pub mod events;
pub mod graph;
pub mod numeric;
pub mod routing;
pub mod scenarios;
pub mod sched;
pub mod sim;
pub mod split;
pub mod taskgen;

pub use error::{Error, Result};
