//! Oracle event detection, F1 metrics and experiment orchestration.

pub mod config;
pub mod detect;
pub mod experiment;
pub mod metrics;

pub use config::ExperimentConfig;
pub use detect::{detect_events, DetectedEvent};
pub use experiment::{run_experiment, run_experiment_file, write_report, ExperimentReport};
pub use metrics::{f1_clip, f1_event, ClassStats, CollarConfig, EventCounts, F1Report};
