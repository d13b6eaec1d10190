//! Host-side companion to `asyndbt-core`: config files, trace files, the
//! remote evaluator transport, and the command implementations behind the
//! `asyndbt` binary.

pub mod commands;
pub mod config;
pub mod evaluator;
pub mod trace;
