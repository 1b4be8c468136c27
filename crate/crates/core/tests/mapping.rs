//! Opcode-word address mapping after translation, on both backends.

use zvm_core::programs;
use zvm_testkit::mapping::{self, Mode};

#[test]
fn trace_mapping_after_compiling_every_target() {
    for p in programs::all() {
        let st = mapping::trace(&p.segment().unwrap(), Mode::CompileAll).unwrap_or_else(|e| panic!("{}: {e}", p.name));
        assert!(st.mapped > 0, "{}", p.name);
    }
}

#[test]
fn trace_mapping_after_running() {
    for p in programs::all() {
        mapping::trace(&p.segment().unwrap(), Mode::Run).unwrap_or_else(|e| panic!("{}: {e}", p.name));
    }
}

#[cfg(target_arch = "x86_64")]
#[test]
fn native_mapping_after_compiling_every_target() {
    for p in programs::all() {
        let st = mapping::native(&p.segment().unwrap(), Mode::CompileAll).unwrap_or_else(|e| panic!("{}: {e}", p.name));
        assert!(st.mapped > 0, "{}", p.name);
    }
}

#[cfg(target_arch = "x86_64")]
#[test]
fn native_mapping_after_running() {
    for p in programs::all() {
        mapping::native(&p.segment().unwrap(), Mode::Run).unwrap_or_else(|e| panic!("{}: {e}", p.name));
    }
}
