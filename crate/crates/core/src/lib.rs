//! Asynchronous distributed bilevel tuner for discrete prompt programs.
//!
//! The crate jointly optimizes categorical distributions over prompt-fragment
//! tokens (consensus-coupled across workers) and per-worker in-context
//! demonstration indices against a pluggable black-box loss. The lower level
//! is solved approximately by a projected augmented-Lagrangian consensus
//! scheme, folded into the upper level through cutting planes, and driven by
//! REINFORCE gradient estimates. [`simnet`] executes the whole loop on a
//! deterministic simulated parameter-server network with stragglers and
//! Byzantine workers.
//!
//! The crate is `no_std`-compatible (with `alloc`); IO, file formats and the
//! CLI live in the companion harness crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod federated;
pub mod lower;
pub mod oracle;
pub mod planes;
pub mod rng;
pub mod simnet;
pub mod simplex;

pub use error::{Error, Result};
pub use simplex::{ProbVector, SignVector};
