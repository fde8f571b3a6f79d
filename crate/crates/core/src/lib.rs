//! Discrete-event model of the dataflow layer of an RL post-training system.
//!
//! - [`costmodel`]: closed-form sample-flow volume, redundancy and throughput.
//! - [`simnet`]: virtual-time network and memory simulator.
//! - [`dock`]: transfer-dock sample store and the centralized baseline.
//! - [`reshard`]: weight resharding between update and generation layouts.
//! - [`pipeline`]: one GRPO-shaped iteration wired over the above.

pub mod config;
pub mod costmodel;
pub mod dock;
pub mod domain;
pub mod pipeline;
pub mod presets;
pub mod reshard;
pub mod simnet;
pub mod units;
pub mod verify;

pub use domain::*;
pub use units::{Bandwidth, ByteSize};
