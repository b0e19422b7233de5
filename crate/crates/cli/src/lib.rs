//! Pipeline orchestration for `umslim`: configuration, the artifact store
//! and the subcommands behind the `umslim` binary.

pub mod commands;
pub mod config;
pub mod store;

pub use commands::{run, Cli};
pub use config::PipelineConfig;
