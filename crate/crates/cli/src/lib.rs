//! Library surface of the experiment CLI; the binary and the integration
//! tests drive the same command implementations.

pub mod commands;
pub mod config;
pub mod table;
