//! HTTP service, persistence and command-line interface for chartlint.

pub mod audit;
pub mod cli;
pub mod engine;
pub mod error;
pub mod http;
pub mod store;
