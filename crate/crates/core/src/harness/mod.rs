//! Experiment plumbing: configuration, metrics files, sweeps and the
//! post-hoc analyses (feature similarity, weight variance, gradient checks).

pub mod analysis;
pub mod config;
pub mod metrics;
pub mod sweep;

pub use analysis::{feature_similarity, gradcheck_suite, train_centralized, variance_track, GradcheckResult, VarianceTrack};
pub use config::{parse_config, parse_config_str, ConfigArgs, ExperimentConfig};
pub use metrics::{read_metrics, write_metrics, write_summary, METRICS_HEADER};
pub use sweep::{sweep, SweepAxis, SweepPoint};
pub use crate::orchestrator::RoundMetrics;
