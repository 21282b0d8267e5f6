//! Configuration, persistence, metrics output and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{apply_override, ExperimentConfig, Mode};
pub use metrics::{
    read_metrics, read_metrics_file, write_metrics, write_metrics_file, MetricsRow, MetricsWriter, COLUMNS,
};
pub use plot::render_plot;
pub use run::{
    run_experiment, run_offline, run_online, run_probe, run_seed, seed_dir, Diagnostics, ExperimentSummary,
    ProbeReport, RunStatus, SeedSummary, METRICS_FILE,
};
pub use sweep::{expand_sweep, run_sweep, Arm, SweepSection};
