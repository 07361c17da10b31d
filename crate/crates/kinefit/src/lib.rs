//! File formats, session manifests, fit reports and the `kinefit` command
//! line, on top of `kinefit-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod executor;
pub mod export;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod script;
