//! End-to-end experiments: configuration, training runs, sweeps and feature
//! export.

mod config;
mod run;

pub use config::{Criterion, DataSource, DatasetConfig, EvalConfig, ModelConfig, RunConfig};
pub use run::{
    derive_seed, export_features, load_data, run_sweep, run_train, summarize, MetricsRow, RecoveryRow, RunOutput,
    SweepAxis, SweepRow, METRICS_HEADER, RECOVERY_HEADER,
};
