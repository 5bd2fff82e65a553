//! Command-line pipeline: cohort generation, training, evaluation and
//! reporting for neural-process normative models.

pub mod commands;
pub mod config;
pub mod exit;
pub mod pipeline;
pub mod report;
