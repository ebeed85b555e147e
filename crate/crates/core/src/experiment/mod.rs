//! Experiment orchestration: configuration, pipeline stages with their
//! on-disk artifacts, reports, comparisons, the dataset-size sweep and
//! scenario dumps.

pub mod config;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod sweep;

pub use config::{CollectConfig, ExperimentConfig, SweepConfig};
pub use pipeline::{Pipeline, SearchHeader, TrajectoryFile};
pub use render::{peak_trajectories, render_trajectory};
pub use report::{compare_runs, Comparison, RunReport, SeedDigest};
pub use sweep::{dataset_size_sweep, SweepTable};
