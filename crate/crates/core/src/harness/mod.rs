//! Multi-agent workflow driver, calibration sets, observation sweeps and
//! length benchmarks.

mod bench;
mod calibration;
mod observe;
mod run;
mod workflow;

pub use bench::{bench_lengths, split_length, write_bench_csv, BenchConfig, BenchRow};
pub use calibration::{profile_from_calibration, CalibrationSource, CalibrationSpec, CALIBRATION_SCHEMA_VERSION};
pub use observe::{observe, MacroRow, Observation, RecoveryRow, TokenRow};
pub use run::{
    agreement, full_oracle, logit_kl, run_workflow, AgentReport, Agreement, ConfigEcho, RunOptions, RunReport,
    SegmentRecord, CSV_COLUMNS, REPORT_SCHEMA_VERSION,
};
pub use workflow::{AgentSpec, ResolvedSlot, TemplateSlot, WorkflowSpec, WORKFLOW_SCHEMA_VERSION};
