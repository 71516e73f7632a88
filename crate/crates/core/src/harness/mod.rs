//! Experiment harness: configs, traces, checks and the command entry points.

pub mod check;
pub mod commands;
pub mod config;
pub mod trace;
