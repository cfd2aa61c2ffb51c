//! Configuration, training and evaluation loops, the sparsity sweep and the
//! metrics files they write.

pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod stats;
pub mod sweep;
pub mod train;

pub use config::RunConfig;
pub use evaluate::{evaluate, EvalTable};
pub use metrics::{MetricsRow, METRICS_HEADER};
pub use sweep::{sweep, SweepPlan, SweepRow};
pub use train::{train, TrainOutcome};
