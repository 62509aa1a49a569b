//! Command-line entry points and the HTTP service.

pub mod cli;
pub mod config;
pub mod service;
