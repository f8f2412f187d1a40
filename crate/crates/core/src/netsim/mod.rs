//! Discrete-event network simulator driving the protocol state machines.

pub mod adversary;
pub mod config;
pub mod report;
mod sim;
pub mod sweep;

pub use config::ScenarioConfig;
pub use report::RunReport;
pub use sim::{run_scenario, run_with_audit};
