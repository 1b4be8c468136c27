//! A ZINC-style bytecode virtual machine with a switch interpreter, a
//! threaded-code interpreter and a demand-driven template JIT.

pub mod heap;
pub mod interp;
pub mod jit;
pub mod trace;
pub mod lambda;
pub mod native;
pub mod prims;
pub mod bytecode;
pub mod value;
pub mod observe;
pub mod engine;
pub mod programs;
