//! Experiment orchestration: configuration, the staged pipeline, the γ sweep
//! and report files.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{DataSpec, DiagnosticsConfig, RunConfig, DEFAULT_GAMMA_GRID};
pub use pipeline::{
    run_paired, run_pipeline, sweep_gamma, ExperimentResult, GammaSweep, PairedDiff, PairedResult, SeedResult, Summary,
};
pub use report::{emit_gamma_sweep, emit_report, read_report, Report};
