//! Experiment orchestration: configuration, seeded runs over a task
//! sequence, persisted results and reports.

mod config;
mod persist;
mod report;
mod seeds;
mod train;

pub use config::{Alternation, EraserConfig, ExperimentConfig, NoiseSchedule, OptimizerConfig};
pub use persist::{
    checkpoint_path, config_dir, latest_checkpoint, run_experiment, run_seed, seed_dir, write_atomic, Aggregate,
    FailureReport, RunCheckpoint, RunSummary, Stat, RUN_CHECKPOINT_SCHEMA,
};
pub use report::{compare, density_histogram, load_summary, principal_axes, report, seed_dirs, DeltaRow, HistogramRow};
pub use seeds::{derive_seed, SeedPlan};
pub use train::{prepare_tasks, run_task, PhaseTimes, RunState, TaskRecord};
