//! HTTP service, configuration and command-line front end for `cbr-core`.

pub mod cli;
pub mod config;
pub mod service;
