//! Distributed unknown-input state estimation and false-data-injection
//! detection for networked DC microgrids.
//!
//! Each microgrid agent runs an unknown-input observer over its own bus,
//! source and incident line currents. Neighbor voltages arrive over a
//! communication channel; a biased channel shows up as a persistent
//! residual on the line current towards the attacker.

pub mod cli;
pub mod detect;
pub mod lti;
pub mod netmodel;
pub mod sim;
pub mod uio;
