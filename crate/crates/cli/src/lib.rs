//! Command-line tools and HTTP service for attribute editing checkpoints.

pub mod commands;
pub mod model;
pub mod service;
