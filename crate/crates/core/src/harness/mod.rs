//! End-to-end experiments: provisioning, the virtual-time event loop,
//! metric collection and output files.

mod config;
mod experiments;
mod report;
mod run;
pub mod stress;

pub use config::ExperimentConfig;
pub use experiments::{compare_cow, timing_experiment, CowComparison, TimingOutcome};
pub use report::{
    mi_dat, p_curve_dat, DelaySamples, DelayStats, MetricsReport, ReplayMetrics, RunArtifacts, StorageMetrics,
    LINEAGE_FILE, MI_FILE, OBSERVATION_FILE, P_CURVE_FILE, REPORT_FILE,
};
pub use run::run;
