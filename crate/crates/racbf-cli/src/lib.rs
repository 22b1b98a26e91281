//! Library surface of the experiment harness, shared by the `racbf` binary
//! and its integration tests.

pub mod config;
pub mod report;
