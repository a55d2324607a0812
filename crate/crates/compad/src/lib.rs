//! Dataset and checkpoint formats, output files and the command line for
//! `compad-core`.

pub mod cadf;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod exec;
pub mod output;
