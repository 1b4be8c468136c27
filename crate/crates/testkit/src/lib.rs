//! Test oracles: a reference evaluator for the lambda language, a random
//! program generator, a heap fuzzer with a shadow graph and JIT mapping
//! checks.

pub mod diff;
pub mod eval;
pub mod gen;
pub mod heapfuzz;
pub mod mapping;
