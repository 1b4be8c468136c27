//! Front end for the `zvm` binary and the benchmark harness.

pub mod bench;
pub mod cli;
