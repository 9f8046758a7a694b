//! Library surface of the experiment harness (the `lam` binary's internals),
//! exposed so integration and acceptance tests can drive experiments
//! directly.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod report;
