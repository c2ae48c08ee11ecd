//! Interactive, on-demand parallel computing at desk scale.
//!
//! - [`fabric`]: message passing between ranks over a shared directory.
//! - [`pgas`]: block-distributed arrays on top of the fabric.
//! - [`launcher`]: local, grid and background job launches.
//! - [`sched`]: per-user core caps, admission and a scheduling simulator.
//! - [`roi`]: return on investment of the service.
//! - [`cli`]: the `ihpc` command.

pub mod cli;
pub mod config;
pub mod fabric;
pub mod launcher;
pub mod pgas;
pub mod roi;
pub mod sched;
