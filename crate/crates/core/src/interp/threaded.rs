//! Threaded-code dispatch: every opcode word is replaced by the displacement
//! of its handler from a common base, so the code array itself maps each
//! instruction to the routine that executes it.

use super::{Exit, Fault, Vm};
use crate::bytecode::{instr_len, Opcode, NUM_OPCODES};
use thiserror::Error;

pub type Handler = fn(&mut Vm, usize) -> Result<usize, Exit>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThreadError {
    #[error("segment is already threaded")]
    AlreadyThreaded,
    #[error("malformed segment at word {0}")]
    Malformed(usize),
    #[error("handler displacement does not fit in a code word")]
    OutOfRange,
}

macro_rules! handlers {
    ($($op:ident => $m:ident),* $(,)?) => {
        /// Handlers indexed by opcode.
        pub static HANDLERS: [Handler; NUM_OPCODES] = [$({
            fn h(vm: &mut Vm, pc: usize) -> Result<usize, Exit> {
                vm.$m(pc)
            }
            h
        }),*];
        #[cfg(test)]
        const ORDER: &[Opcode] = &[$(Opcode::$op),*];
    };
}

handlers! {
    Acc => op_acc, Push => op_push, PushAcc => op_pushacc, Pop => op_pop,
    Assign => op_assign, EnvAcc => op_envacc, ConstInt => op_constint, Atom => op_atom,
    OffsetInt => op_offsetint, NegInt => op_negint, BoolNot => op_boolnot,
    AddInt => op_addint, SubInt => op_subint, MulInt => op_mulint, DivInt => op_divint,
    ModInt => op_modint, AndInt => op_andint, OrInt => op_orint, XorInt => op_xorint,
    LslInt => op_lslint, LsrInt => op_lsrint, AsrInt => op_asrint,
    Eq => op_eq, Neq => op_neq, LtInt => op_ltint, LeInt => op_leint, GtInt => op_gtint,
    GeInt => op_geint, IsInt => op_isint,
    Apply => op_apply, AppTerm => op_appterm, Return => op_return, Restart => op_restart,
    Grab => op_grab, Closure => op_closure, ClosureRec => op_closurerec,
    OffsetClosure => op_offsetclosure,
    MakeBlock => op_makeblock, MakeFloatBlock => op_makefloatblock,
    GetGlobal => op_getglobal, SetGlobal => op_setglobal, GetGlobalField => op_getglobalfield,
    GetField => op_getfield, SetField => op_setfield, GetFloatField => op_getfloatfield,
    SetFloatField => op_setfloatfield, GetStringChar => op_getstringchar,
    SetStringChar => op_setstringchar, VectLength => op_vectlength, GetVectItem => op_getvectitem,
    SetVectItem => op_setvectitem,
    Branch => op_branch, BranchIf => op_branchif, BranchIfNot => op_branchifnot,
    Beq => op_beq, Bneq => op_bneq, BltInt => op_bltint, BleInt => op_bleint,
    BgtInt => op_bgtint, BgeInt => op_bgeint, Switch => op_switch,
    PushTrap => op_pushtrap, PopTrap => op_poptrap, Raise => op_raise,
    CheckSignals => op_check_signals, CCall => op_ccall, GetMethod => op_getmethod,
    Stop => op_stop,
}

/// Base address that displacements are measured from. Chosen so that every
/// displacement is at least NUM_OPCODES and can never read as a raw opcode.
pub fn handler_base() -> usize {
    let min = HANDLERS.iter().map(|h| *h as usize).min().expect("non-empty table");
    min - NUM_OPCODES
}

/// Rewrites every instruction-start word of `words` into its handler
/// displacement, returning the base to dispatch against.
pub fn thread_code(words: &mut [i32]) -> Result<usize, ThreadError> {
    if words.first().is_some_and(|&w| Opcode::from_word(w).is_none()) {
        return Err(ThreadError::AlreadyThreaded);
    }
    let base = handler_base();
    let mut disp = [0i32; NUM_OPCODES];
    for (d, h) in disp.iter_mut().zip(HANDLERS.iter()) {
        *d = i32::try_from(*h as usize - base).map_err(|_| ThreadError::OutOfRange)?;
    }
    let mut at = 0;
    while at < words.len() {
        let len = instr_len(words, at).map_err(|_| ThreadError::Malformed(at))?;
        words[at] = disp[words[at] as usize];
        at += len;
    }
    Ok(base)
}

/// Threaded dispatch loop over code previously rewritten by [`thread_code`].
pub fn run_threaded(vm: &mut Vm, base: usize, mut pc: usize) -> Exit {
    let mut steps = vm.counters.instructions;
    let budget = vm.budget;
    let exit = loop {
        if steps >= budget {
            break Exit::Fault(Fault::StepBudgetExceeded);
        }
        steps += 1;
        let d = vm.code[pc];
        // SAFETY: `d` was written by thread_code as (handler - base).
        let h: Handler = unsafe { std::mem::transmute::<usize, Handler>(base.wrapping_add(d as usize)) };
        match h(vm, pc) {
            Ok(next) => pc = next,
            Err(e) => break e,
        }
    };
    vm.counters.instructions = steps;
    vm.counters.dispatches = steps;
    exit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;

    #[test]
    fn table_follows_opcode_order() {
        for (i, op) in ORDER.iter().enumerate() {
            assert_eq!(*op as usize, i);
        }
        assert_eq!(ORDER.len(), NUM_OPCODES);
    }

    #[test]
    fn displacements_are_never_opcodes() {
        let seg = assemble("CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3\nBRANCH l\nl: STOP").unwrap();
        let mut w = seg.words.clone();
        thread_code(&mut w).unwrap();
        for (at, _) in seg.instructions().unwrap() {
            assert!(w[at] >= NUM_OPCODES as i32, "word {at} = {}", w[at]);
        }
        assert_eq!(w[1], 1);
    }

    #[test]
    fn threading_twice_fails() {
        let seg = assemble("PUSH").unwrap();
        let mut w = seg.words.clone();
        thread_code(&mut w).unwrap();
        assert_eq!(thread_code(&mut w), Err(ThreadError::AlreadyThreaded));
    }
}
