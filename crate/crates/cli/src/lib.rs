//! Command-line front end for training and evaluating DRF codes.

pub mod commands;
pub mod config;
pub mod output;
