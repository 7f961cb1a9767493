//! HTTP service and command line for the evoflow engine.

pub mod app;
pub mod cli;
pub mod config;
pub mod runtime;
