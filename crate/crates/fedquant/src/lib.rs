//! Federated quantile estimation under local differential privacy.
//!
//! Clients privatize each quantile-threshold comparison with randomized
//! response, run local SGD between synchronization rounds, and a
//! coordinator averages their iterates. Confidence intervals come from an
//! online self-normalizer over the round path, with critical values
//! simulated from Brownian functionals on the schedule's time grid. The
//! crate also ships two comparison baselines (Laplace-noise DP-SGD and
//! one-shot divide-and-conquer), scenario generators with analytic
//! ground-truth oracles, CSV ingestion for real data, and a replication
//! harness that produces coverage/error reports.
//!
//! Everything is deterministic given a master seed: every random draw
//! comes from a counter-based stream keyed by (seed, purpose, replication,
//! unit), so runs reproduce bit-for-bit regardless of thread count.

pub mod baselines;
pub mod client;
pub mod config;
pub mod coordinator;
pub mod dist;
pub mod error;
pub mod harness;
pub mod inference;
pub mod ingest;
pub mod mechanism;
pub mod pivot;
pub mod scenarios;
pub mod schedule;
pub mod streams;

pub use config::{ClientSpec, FederationConfig};
pub use coordinator::{run_federated, Trajectory};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentPlan, Method, MetricsReport, ReportRow};
pub use inference::{confidence_interval, ConfidenceInterval, SelfNormAccumulators};
pub use pivot::{pivot_quantile, PivotSpec, PivotTable};
pub use scenarios::{make_scenario, oracle_quantile, ScenarioSpec};
pub use schedule::{CommSchedule, Horizon, Strategy};
