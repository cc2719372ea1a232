use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::Cli;

/// Everything needed to audit a run and execute it again.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    /// The parsed invocation; `mgll replay` re-executes it.
    pub config: Cli,
    pub results: Value,
    pub wall_clock_seconds: f64,
}
