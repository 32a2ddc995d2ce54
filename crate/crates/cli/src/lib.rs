//! Command-line front end: experiment configs, the five commands, and their
//! on-disk outputs.

pub mod commands;
pub mod config;
pub mod jobs;
pub mod output;
pub mod variants;
