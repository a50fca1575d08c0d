//! Scenario-driven front end for the ensemble control library: parse a
//! scenario file, run its solver and write CSV/JSON artifacts for plotting.

pub mod examples;
pub mod plotdata;
pub mod run;
pub mod scenario;
pub mod shapes;
pub mod table;

pub use plotdata::emit_plotdata;
pub use run::{apply_overrides, run_scenario, RunArtifacts, RunOutcome, Summary};
pub use scenario::{parse_scenario, parse_scenario_str, Scenario, ScenarioError};
