//! Command-line driver for the few-shot multimodal fake-news pipeline.
//!
//! The binary is a thin argument parser over [`run::cmd_run`],
//! [`table::render`] and [`commands`].

pub mod commands;
pub mod config;
pub mod run;
pub mod table;
