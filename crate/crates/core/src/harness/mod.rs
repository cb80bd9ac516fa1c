//! Command line, configuration, checkpoints, metrics, horizon buckets,
//! report tables and image output.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod ppm;
pub mod report;
