//! Monte Carlo simulation of user-centric cell-free massive MIMO: deployment,
//! fading, MMSE estimation, centralized and distributed uplink/downlink
//! processing, power control and fronthaul accounting.

pub mod cluster;
pub mod correlation;
pub mod estimation;
pub mod error;
pub mod harness;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod powerctl;
pub mod downlink;
pub mod uplink;

pub use error::{CellFreeError, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    pub mod getting_started {}
    #[doc = include_str!("../../../book/src/channels.md")]
    pub mod channels {}
    #[doc = include_str!("../../../book/src/processing.md")]
    pub mod processing {}
    #[doc = include_str!("../../../book/src/power.md")]
    pub mod power {}
    #[doc = include_str!("../../../book/src/scalability.md")]
    pub mod scalability {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
