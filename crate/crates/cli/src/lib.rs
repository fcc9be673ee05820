//! Library side of the micrograph quantification CLI: run configuration,
//! the report pipeline, SVG plot emission, and the subcommand
//! implementations. The binary in `main.rs` is a thin argument-parsing
//! wrapper over this crate.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;
