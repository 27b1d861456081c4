//! Library surface of the command-line tool, split out so integration tests
//! can drive every command without spawning processes.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod optim;
pub mod train;
