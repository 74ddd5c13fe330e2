//! Planning hybrid parallelism and sharding for long-sequence transformer
//! training: an analytical cost model, an exhaustive top-K plan search and
//! two small simulators (communication/computation overlap and a caching
//! allocator) for reasoning about runtime effects the estimator ignores.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod cost;
pub mod error;
pub mod mempool;
pub mod model;
pub mod overlap;
pub mod placement;
pub mod report;
pub mod search;
pub mod strategy;

pub use cluster::{Axis, BandwidthProfile, ClusterConfig, Collective};
pub use cost::{ComputeModel, CostBreakdown, Estimator, EstimatorSettings};
pub use error::{Error, Result};
pub use model::{ModelConfig, Preset};
pub use search::{explain, search, PlanReport, SearchOptions};
pub use strategy::{validate, Strategy};
