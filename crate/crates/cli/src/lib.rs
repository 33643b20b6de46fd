//! File formats, configuration and experiment commands on top of
//! `bovila-core`.

pub mod commands;
pub mod config;
pub mod io;
