//! Library side of the `patchem` CLI; the binary in `main.rs` is a thin
//! argument-parsing shell over [`commands`].

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
