//! HTTP service and command line tools around the dialogue engine.

pub mod app;
pub mod commands;
pub mod config;
pub mod provider;
pub mod sessions;
