//! Command-line front end for the flow-window detection pipeline: run
//! configs in, reproducible artifacts (checkpoints, metrics, reports,
//! manifests) out.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
