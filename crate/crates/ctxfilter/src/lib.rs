//! Filesystem, network and command-line layer over `ctxfilter-core`.
//!
//! * [`repo`] loads repositories from disk.
//! * [`tasks`] reads and writes completion task files.
//! * [`formats`] holds the line-delimited dump, dataset, report and trace
//!   formats.
//! * [`remote`] talks to a completions-style HTTP endpoint.
//! * [`record`] records backend traffic and replays it.
//! * [`config`] and [`cli`] implement the `ctxfilter` binary.

pub mod cli;
pub mod config;
pub mod formats;
pub mod record;
pub mod remote;
pub mod repo;
pub mod tasks;

pub use ctxfilter_core as core;
