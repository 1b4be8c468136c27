//! Checks of the opcode-word address mapping left behind by the JIT.
//!
//! After translation each instruction-start word must either still hold
//! its raw opcode or hold a negative offset from the end of the code area
//! that names the start of that instruction's template. Operand words are
//! never touched.

use std::collections::HashMap;
use zvm_core::bytecode::{Instr, Segment, NUM_OPCODES};
use zvm_core::interp::{Vm, VmConfig};
use zvm_core::jit::{Emitter, JitOptions, LogEntry};
use zvm_core::prims::Registry;
use zvm_core::trace::{self, Slot, TraceOp};

macro_rules! ensure {
    ($c:expr, $($fmt:tt)*) => {
        if !$c {
            return Err(format!($($fmt)*));
        }
    };
}

/// When to check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Compile the entry and every code target, run nothing.
    CompileAll,
    /// Compile the entry and run the program, compiling on demand.
    Run,
}

#[derive(Clone, Copy, Debug)]
pub struct Arena {
    pub start: i64,
    pub end: i64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MappingStats {
    pub instructions: usize,
    pub mapped: usize,
}

/// Every code target: closure bodies, handlers, branch labels.
pub fn targets(ins: &[(usize, Instr)]) -> Vec<usize> {
    let mut t: Vec<usize> = ins.iter().flat_map(|(pc, i)| i.targets(*pc)).map(|t| t as usize).collect();
    t.sort_unstable();
    t.dedup();
    t
}

pub fn check(
    original: &[i32],
    words: &[i32],
    ins: &[(usize, Instr)],
    log: &[LogEntry],
    arena: Arena,
    lookup: impl Fn(usize) -> Option<i64>,
) -> Result<MappingStats, String> {
    let mapped: HashMap<usize, i64> = log.iter().filter(|l| l.mapped).map(|l| (l.pc, l.start)).collect();
    let mut starts = vec![false; words.len()];
    let mut st = MappingStats { instructions: ins.len(), mapped: 0 };
    for (pc, i) in ins {
        let pc = *pc;
        starts[pc] = true;
        let w = words[pc];
        if w >= 0 {
            ensure!(w < NUM_OPCODES as i32, "@{pc}: word {w} is neither an opcode nor an offset");
            ensure!(w == original[pc], "@{pc}: opcode changed from {} to {w}", original[pc]);
            ensure!(lookup(pc).is_none(), "@{pc}: lookup_native maps an untranslated instruction");
            ensure!(!mapped.contains_key(&pc), "@{pc}: translated at offset zero but not mapped");
        } else {
            let addr = arena.end + w as i64;
            ensure!(addr >= arena.start && addr < arena.end, "@{pc}: {addr:#x} outside the arena");
            ensure!(lookup(pc) == Some(addr), "@{pc}: lookup_native disagrees with the word");
            // A chain head would name a jump's patch slot, never a template start.
            ensure!(mapped.get(&pc) == Some(&addr), "@{pc} ({}): unresolved jump chain", i.op);
            st.mapped += 1;
        }
    }
    for (pc, w) in words.iter().enumerate() {
        ensure!(starts[pc] || *w == original[pc], "@{pc}: operand word changed");
    }
    Ok(st)
}

fn decode(seg: &Segment) -> Result<Vec<(usize, Instr)>, String> {
    seg.instructions().map_err(|e| e.to_string())
}

pub fn trace(seg: &Segment, mode: Mode) -> Result<MappingStats, String> {
    let ins = decode(seg)?;
    let mut vm = Vm::new(seg, &Registry::builtins(), &VmConfig::default()).map_err(|e| e.to_string())?;
    let original = vm.code.clone();
    let mut jit = trace::new_jit(JitOptions::default(), vm.code.len()).map_err(|e| e.to_string())?;
    jit.ts.keep_log = true;
    let start = jit.compile(&mut vm.code, 0).map_err(|e| e.to_string())?;
    ensure!(jit.lookup_native(&vm.code, 0) == Some(start), "entry: lookup_native disagrees with compile");
    match mode {
        Mode::CompileAll => {
            for t in targets(&ins) {
                let a = jit.compile(&mut vm.code, t).map_err(|e| e.to_string())?;
                ensure!(jit.lookup_native(&vm.code, t) == Some(a), "@{t}: lookup_native disagrees with compile");
            }
        }
        Mode::Run => {
            trace::execute(&mut vm, &mut jit, start).map_err(|e| e.to_string())?;
        }
    }
    let end = jit.emitter.code_end();
    ensure!(jit.emitter.cursor() <= end, "code overran the arena");
    for (op, at) in jit.emitter.ops.iter().zip(&jit.emitter.pos) {
        if let TraceOp::Branch(_, s) = op {
            ensure!(matches!(s, Slot::Resolved(_)), "jump at {at} still chained");
        }
    }
    check(&original, &vm.code, &ins, &jit.ts.log, Arena { start: 0, end }, |pc| jit.lookup_native(&vm.code, pc))
}

#[cfg(target_arch = "x86_64")]
pub fn native(seg: &Segment, mode: Mode) -> Result<MappingStats, String> {
    use zvm_core::native::NativeJit;
    let ins = decode(seg)?;
    let mut vm = Vm::new(seg, &Registry::builtins(), &VmConfig::default()).map_err(|e| e.to_string())?;
    let original = vm.code.clone();
    let mut jit = NativeJit::new(JitOptions::default(), &vm).map_err(|e| e.to_string())?;
    jit.tr.ts.keep_log = true;
    let start = jit.compile(&mut vm.code, 0).map_err(|e| e.to_string())?;
    ensure!(jit.lookup_native(&vm.code, 0) == Some(start), "entry: lookup_native disagrees with compile");
    match mode {
        Mode::CompileAll => {
            for t in targets(&ins) {
                let a = jit.compile(&mut vm.code, t).map_err(|e| e.to_string())?;
                ensure!(jit.lookup_native(&vm.code, t) == Some(a), "@{t}: lookup_native disagrees with compile");
            }
        }
        Mode::Run => {
            jit.run(&mut vm, 0).map_err(|e| e.to_string())?;
        }
    }
    let e = &jit.tr.emitter;
    let arena = Arena { start: e.code_start(), end: e.code_end() };
    check(&original, &vm.code, &ins, &jit.tr.ts.log, arena, |pc| jit.lookup_native(&vm.code, pc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use zvm_core::bytecode::asm::assemble;

    #[test]
    fn branchy_program_maps_cleanly() {
        let seg = assemble("CONSTINT 3\nBRANCHIFNOT l\nCONSTINT 4\nl: STOP").unwrap();
        let st = trace(&seg, Mode::CompileAll).unwrap();
        assert_eq!(st.mapped, st.instructions);
    }

    #[test]
    fn tampered_word_is_caught() {
        let seg = assemble("CONSTINT 3\nPUSH\nACC 0\nSTOP").unwrap();
        let ins = seg.instructions().unwrap();
        let mut words = seg.words.clone();
        words[1] = 9;
        let r = check(&seg.words, &words, &ins, &[], Arena { start: 0, end: 100 }, |_| None);
        assert!(r.unwrap_err().contains("operand word changed"));
    }
}
