//! Harness around `tqt-core`: synthetic workloads, pipeline runs, sweeps,
//! SAS grids and tile traces.

pub mod app;
pub mod error;
pub mod run;
pub mod selectors;
pub mod softmax_bench;
pub mod sweep;
pub mod trace;
pub mod workload;

pub use error::{CliError, Result};
pub use run::{run, RunConfig, RunReport};
pub use selectors::Selector;
pub use sweep::{sweep, Axis, SweepRow};
pub use workload::{Workload, WorkloadSpec};
