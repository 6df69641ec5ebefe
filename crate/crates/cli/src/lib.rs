//! Experiment harness around `rte-core`: configuration, studies, reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod studies;
