//! Command-line entry points and the HTTP API around a trained captioner.

pub mod api;
pub mod cli;
pub mod pgm;
