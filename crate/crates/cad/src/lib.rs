//! Command line entry points and the HTTP inference / reader-study service.

pub mod cli;
pub mod commands;
pub mod config;
pub mod service;
pub mod study;
