//! Experiment tooling: skewed key streams, trace files, synthetic bulk
//! loads, trace replay against a [`hps_core::Stack`] (or a remote server)
//! and metrics reports.

pub mod config;
pub mod error;
pub mod load;
pub mod replay;
pub mod report;
pub mod workload;

pub use error::{HarnessError, Result};
pub use report::MetricsReport;
pub use workload::{Trace, WorkloadSpec, ZipfSampler};
