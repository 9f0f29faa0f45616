//! Measurement harness for the *maximum effective context window* (MECW)
//! of language models.
//!
//! A model's advertised context window says how many tokens it will
//! accept; its effective window is how many it can actually use before
//! answers degrade — and that boundary depends on the kind of question
//! being asked. This crate measures it per task type:
//!
//! 1. [`synthgen`] generates a seeded dataset of synthetic fact rows
//!    ("Abigail Holmes has 19 red balloons.").
//! 2. [`tasks`] builds one of four question types over a sampled context
//!    (single-fact lookup, filtered sum, grand total, sort-and-concatenate)
//!    and grades answers against exact oracles.
//! 3. [`sweep`] walks a ladder of context sizes, invoking either a live
//!    chat-completions endpoint or the deterministic simulated model in
//!    [`modelio`], and persists every trial through [`store`].
//! 4. [`stats`] buckets trials by prompt token count and attaches
//!    log-space significance figures that stay finite far below the
//!    double-precision underflow threshold.
//! 5. [`estimator`] locates the token count where accuracy breaks down,
//!    ranks models per task, and exposes the cascading-failure
//!    calculator.
//! 6. [`report`] renders tables, curves and summaries from stored
//!    analysis results without recomputing anything.
//!
//! The `mecw` binary in this crate exposes the pipeline as subcommands;
//! see [`cli`].

pub mod cli;
pub mod error;
pub mod estimator;
pub mod lexicon;
pub mod modelio;
pub mod report;
pub mod rng;
pub mod stats;
pub mod store;
pub mod sweep;
pub mod synthgen;
pub mod tasks;

pub use error::{Error, Result};
