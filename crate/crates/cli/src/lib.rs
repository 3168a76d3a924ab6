//! Scenario scripts, a deterministic runner and trace comparison for the
//! `gcsim` binary.

pub mod runner;
pub mod scenario;

pub use runner::{run, RunError, RunOptions, RunOutput, RunStats};
pub use scenario::{parse_scenario, Event, Scenario, ScenarioError, Scheme};

use similar::TextDiff;

/// Unified diff of two traces; empty when they are identical.
pub fn compare_runs(trace_a: &str, trace_b: &str) -> String {
    if trace_a == trace_b {
        return String::new();
    }
    TextDiff::from_lines(trace_a, trace_b)
        .unified_diff()
        .context_radius(1)
        .header("a", "b")
        .to_string()
}
