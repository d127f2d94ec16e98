//! Telemetry/command gateway and headless benchmark for the receding-horizon
//! controller in `recede-core`.

pub mod bench;
pub mod protocol;
pub mod server;
