//! Training loop, cross-validation, experiment sweeps and reports for the
//! `rtnag` model. The `rtnag` binary is a thin command-line layer over this
//! crate.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod cv;
pub mod experiments;
pub mod gradsuite;
pub mod report;
pub mod train;

pub use config::ExperimentConfig;
