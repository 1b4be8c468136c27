//! Host-independent backend. Templates are recorded as abstract operations
//! at synthetic arena positions, and an evaluator runs the recorded program
//! against a [`Vm`]. Everything the translator does to native code (address
//! mapping, jump threading, stack-offset elision, the nop sled) happens
//! here too, so the driver can be tested on any host.

use crate::bytecode::{Instr, Opcode, NUM_OPCODES};
use crate::interp::{int_op, Exit, Fault, Vm};
use crate::jit::{Cx, Emitter, JitError, JitOptions, Translator, MAX_ARENA_SIZE};
use crate::value::Value;
use std::fmt;
use thiserror::Error;

/// Synthetic size of the compile trampoline.
pub const TRAMPOLINE_BYTES: i64 = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("jump at arena position {at} was never patched")]
    UnresolvedPatch { at: i64 },
    #[error("no trace op starts at arena position {0}")]
    BadTarget(i64),
    #[error(transparent)]
    Jit(#[from] JitError),
}

/// Contents of a jump's patch slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Link in a forward-jump chain: previous opcode-word content.
    Chain(i32),
    /// Target, relative to code_end.
    Resolved(i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    Always,
    IfTrue,
    IfFalse,
    /// BEQ-style test of the immediate against the integer in accu.
    Cmp(Opcode, i64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceOp {
    /// accu := stack[sp + n]
    Load(i32),
    /// stack[sp + n] := accu
    Store(i32),
    StackAdjust(i32),
    Const(Value),
    /// OFFSETINT (with its operand), NEGINT, BOOLNOT, ISINT.
    Unary(Opcode, i64),
    /// accu := accu op stack[sp + n]
    BinaryIntOp(Opcode, i32),
    Branch(Cond, Slot),
    /// Jump to the native code of the bytecode pc left by the previous op.
    TrampolineJump,
    /// Runtime helper executing one instruction. With `next`, execution
    /// falls through when the helper returns that pc and jumps through the
    /// trampoline otherwise; without, the pc is left for a TrampolineJump.
    Exec { op: Opcode, pc: usize, next: Option<usize> },
    CCall { pc: usize, next: usize },
    AllocFastPath { pc: usize, next: usize },
    RaiseHelper,
    Halt,
}

impl TraceOp {
    /// Synthetic byte size, close to the x86-64 template.
    pub fn size(&self) -> i64 {
        match self {
            TraceOp::Load(_) | TraceOp::Store(_) | TraceOp::StackAdjust(_) => 4,
            TraceOp::Const(_) => 10,
            TraceOp::Unary(..) => 7,
            TraceOp::BinaryIntOp(..) => 8,
            TraceOp::Branch(Cond::Always, _) => 5,
            TraceOp::Branch(Cond::Cmp(..), _) => 19,
            TraceOp::Branch(..) => 10,
            TraceOp::TrampolineJump => 16,
            TraceOp::Exec { .. } | TraceOp::CCall { .. } => 22,
            TraceOp::AllocFastPath { .. } => 48,
            TraceOp::RaiseHelper => 16,
            TraceOp::Halt => 22,
        }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceOp::Load(n) => write!(f, "load {n}"),
            TraceOp::Store(n) => write!(f, "store {n}"),
            TraceOp::StackAdjust(n) => write!(f, "sp += {n}"),
            TraceOp::Const(v) => write!(f, "const {v:?}"),
            TraceOp::Unary(op, n) => write!(f, "{} {n}", op.mnemonic().to_lowercase()),
            TraceOp::BinaryIntOp(op, n) => write!(f, "{} [{n}]", op.mnemonic().to_lowercase()),
            TraceOp::Branch(c, s) => write!(f, "branch {c:?} {s:?}"),
            TraceOp::TrampolineJump => f.write_str("trampoline"),
            TraceOp::Exec { op, pc, next } => write!(f, "exec {op} @{pc} next={next:?}"),
            TraceOp::CCall { pc, .. } => write!(f, "ccall @{pc}"),
            TraceOp::AllocFastPath { pc, .. } => write!(f, "alloc @{pc}"),
            TraceOp::RaiseHelper => f.write_str("raise"),
            TraceOp::Halt => f.write_str("halt"),
        }
    }
}

pub struct TraceEmitter {
    pub ops: Vec<TraceOp>,
    pub pos: Vec<i64>,
    cursor: i64,
    code_end: i64,
    /// Entries into the compile trampoline through the nop sled.
    pub sled_entries: u64,
}

impl TraceEmitter {
    pub fn new(arena_size: usize) -> Result<TraceEmitter, JitError> {
        let tail = NUM_OPCODES as i64 + TRAMPOLINE_BYTES;
        if arena_size > MAX_ARENA_SIZE || (arena_size as i64) <= tail {
            return Err(JitError::ArenaSize(arena_size));
        }
        Ok(TraceEmitter { ops: Vec::new(), pos: Vec::new(), cursor: 0, code_end: arena_size as i64 - tail, sled_entries: 0 })
    }

    fn emit(&mut self, op: TraceOp) -> Result<i64, JitError> {
        let at = self.cursor;
        if at + op.size() > self.code_end {
            return Err(JitError::ArenaExhausted);
        }
        self.cursor += op.size();
        self.ops.push(op);
        self.pos.push(at);
        Ok(at)
    }

    pub fn index_of(&self, at: i64) -> Option<usize> {
        self.pos.binary_search(&at).ok()
    }

    fn slot_mut(&mut self, site: i64) -> &mut Slot {
        let i = self.index_of(site).expect("jump site");
        match &mut self.ops[i] {
            TraceOp::Branch(_, s) => s,
            other => panic!("{other} has no patch slot"),
        }
    }

    fn branch(&mut self, cx: &mut Cx<'_>, cond: Cond, pc: usize) -> Result<(), JitError> {
        let site = self.emit(TraceOp::Branch(cond, Slot::Chain(0)))?;
        cx.link(self, site, pc);
        Ok(())
    }

    /// One line per op: arena position and operation.
    pub fn dump(&self) -> String {
        self.ops.iter().zip(&self.pos).map(|(op, at)| format!("{at:08x}  {op}\n")).collect()
    }
}

impl Emitter for TraceEmitter {
    fn code_end(&self) -> i64 {
        self.code_end
    }

    fn cursor(&self) -> i64 {
        self.cursor
    }

    fn template(&mut self, cx: &mut Cx<'_>, pc: usize, ins: &Instr) -> Result<(), JitError> {
        use Opcode::*;
        let o = cx.stack_offset;
        let a = |k: usize| ins.args[k];
        let next = pc + ins.word_len();
        match ins.op {
            Acc => {
                self.emit(TraceOp::Load(o + a(0) as i32))?;
            }
            Push => {
                self.emit(TraceOp::Store(o - 1))?;
                cx.stack_offset -= 1;
            }
            PushAcc => {
                self.emit(TraceOp::Store(o - 1))?;
                cx.stack_offset -= 1;
                self.emit(TraceOp::Load(o - 1 + a(0) as i32))?;
            }
            Pop => cx.stack_offset += a(0) as i32,
            Assign => {
                self.emit(TraceOp::Store(o + a(0) as i32))?;
                self.emit(TraceOp::Const(Value::UNIT))?;
            }
            ConstInt => {
                self.emit(TraceOp::Const(Value::of_int(a(0))))?;
            }
            OffsetInt => {
                self.emit(TraceOp::Unary(OffsetInt, a(0)))?;
            }
            NegInt | BoolNot | IsInt => {
                self.emit(TraceOp::Unary(ins.op, 0))?;
            }
            AddInt | SubInt | MulInt | AndInt | OrInt | XorInt | LslInt | LsrInt | AsrInt | Eq | Neq | LtInt
            | LeInt | GtInt | GeInt => {
                self.emit(TraceOp::BinaryIntOp(ins.op, o))?;
                cx.stack_offset += 1;
            }
            Branch => {
                cx.flush(self)?;
                self.branch(cx, Cond::Always, ins.targets(pc)[0] as usize)?;
            }
            BranchIf | BranchIfNot => {
                cx.flush(self)?;
                let c = if ins.op == BranchIf { Cond::IfTrue } else { Cond::IfFalse };
                self.branch(cx, c, ins.targets(pc)[0] as usize)?;
            }
            Beq | Bneq | BltInt | BleInt | BgtInt | BgeInt => {
                cx.flush(self)?;
                self.branch(cx, Cond::Cmp(ins.op, a(0)), ins.targets(pc)[0] as usize)?;
            }
            Stop => {
                cx.flush(self)?;
                self.emit(TraceOp::Halt)?;
            }
            Raise => {
                cx.flush(self)?;
                self.emit(TraceOp::RaiseHelper)?;
            }
            CCall => {
                cx.flush(self)?;
                self.emit(TraceOp::CCall { pc, next })?;
            }
            MakeBlock => {
                cx.flush(self)?;
                self.emit(TraceOp::AllocFastPath { pc, next })?;
            }
            Apply | Return | AppTerm | Switch => {
                cx.flush(self)?;
                self.emit(TraceOp::Exec { op: ins.op, pc, next: None })?;
                self.emit(TraceOp::TrampolineJump)?;
                if ins.op == Switch {
                    for t in ins.targets(pc) {
                        cx.enqueue(t as usize);
                    }
                }
            }
            _ => {
                cx.flush(self)?;
                self.emit(TraceOp::Exec { op: ins.op, pc, next: Some(next) })?;
            }
        }
        Ok(())
    }

    fn stack_adjust(&mut self, words: i32) -> Result<(), JitError> {
        self.emit(TraceOp::StackAdjust(words)).map(|_| ())
    }

    fn jump(&mut self) -> Result<i64, JitError> {
        self.emit(TraceOp::Branch(Cond::Always, Slot::Chain(0)))
    }

    fn read_slot(&self, site: i64) -> i32 {
        match &self.ops[self.index_of(site).expect("jump site")] {
            TraceOp::Branch(_, Slot::Chain(v)) => *v,
            other => panic!("read of a resolved or missing slot: {other}"),
        }
    }

    fn write_slot(&mut self, site: i64, v: i32) {
        *self.slot_mut(site) = Slot::Chain(v);
    }

    fn resolve_slot(&mut self, site: i64, target: i64) {
        let rel = (target - self.code_end) as i32;
        *self.slot_mut(site) = Slot::Resolved(rel);
    }
}

pub type TraceJit = Translator<TraceEmitter>;

pub fn new_jit(options: JitOptions, code_len: usize) -> Result<TraceJit, JitError> {
    Ok(Translator::new(TraceEmitter::new(options.arena_size)?, options, code_len))
}

/// Native position for bytecode `pc`: the mapped code, or the compile
/// trampoline reached through the nop sled.
fn trampoline(vm: &mut Vm, jit: &mut TraceJit, pc: usize) -> Result<usize, TraceError> {
    let w = vm.code[pc];
    let mut target = jit.emitter.code_end + w as i64;
    if w >= 0 {
        debug_assert!(w < NUM_OPCODES as i32);
        jit.emitter.sled_entries += 1;
        target = jit.compile(&mut vm.code, pc)?;
    }
    jit.emitter.index_of(target).ok_or(TraceError::BadTarget(target))
}

fn slot_value(vm: &Vm, n: i32) -> Result<Value, Exit> {
    let i = vm.sp as i64 + n as i64;
    match usize::try_from(i).ok().and_then(|i| vm.stack.get(i)) {
        Some(v) => Ok(*v),
        None => Err(Exit::Fault(Fault::StackOverflow)),
    }
}

/// Records the helper's pc in `bc`; returns it when execution must leave the
/// straight-line path.
fn resume(r: Result<usize, Exit>, next: Option<usize>, bc: &mut usize) -> Result<Option<usize>, Exit> {
    let r = r?;
    *bc = r;
    Ok((Some(r) != next).then_some(r))
}

/// Runs recorded code from arena position `start` until the program stops.
pub fn execute(vm: &mut Vm, jit: &mut TraceJit, start: i64) -> Result<Exit, TraceError> {
    let mut i = jit.emitter.index_of(start).ok_or(TraceError::BadTarget(start))?;
    let mut bc = 0usize;
    let mut steps = vm.counters.instructions;
    let exit = loop {
        if steps >= vm.budget {
            break Exit::Fault(Fault::StepBudgetExceeded);
        }
        steps += 1;
        let ops = &jit.emitter.ops;
        let jump_to = match &ops[i] {
            TraceOp::Load(n) => match slot_value(vm, *n) {
                Ok(v) => {
                    vm.accu = v;
                    None
                }
                Err(e) => break e,
            },
            TraceOp::Store(n) => {
                let at = vm.sp as i64 + *n as i64;
                match usize::try_from(at).ok().and_then(|at| vm.stack.get_mut(at)) {
                    Some(s) => *s = vm.accu,
                    None => break Exit::Fault(Fault::StackOverflow),
                }
                None
            }
            TraceOp::StackAdjust(n) => {
                vm.sp = (vm.sp as i64 + *n as i64) as usize;
                None
            }
            TraceOp::Const(v) => {
                vm.accu = *v;
                None
            }
            TraceOp::Unary(op, n) => {
                let a = vm.accu.0;
                vm.accu = match op {
                    Opcode::OffsetInt => Value(a.wrapping_add((*n as u64) << 1)),
                    Opcode::NegInt => Value(2u64.wrapping_sub(a)),
                    Opcode::BoolNot => Value(4u64.wrapping_sub(a)),
                    _ => Value::of_bool(vm.accu.is_int()),
                };
                None
            }
            TraceOp::BinaryIntOp(op, n) => match slot_value(vm, *n) {
                Ok(b) => {
                    vm.accu = Value(int_op(*op, vm.accu.0, b.0));
                    None
                }
                Err(e) => break e,
            },
            TraceOp::Branch(cond, slot) => {
                let taken = match cond {
                    Cond::Always => true,
                    Cond::IfTrue => vm.accu != Value::FALSE,
                    Cond::IfFalse => vm.accu == Value::FALSE,
                    Cond::Cmp(op, v) => {
                        let a = vm.accu.as_int();
                        match op {
                            Opcode::Beq => *v == a,
                            Opcode::Bneq => *v != a,
                            Opcode::BltInt => *v < a,
                            Opcode::BleInt => *v <= a,
                            Opcode::BgtInt => *v > a,
                            _ => *v >= a,
                        }
                    }
                };
                if taken {
                    let Slot::Resolved(rel) = *slot else {
                        return Err(TraceError::UnresolvedPatch { at: jit.emitter.pos[i] });
                    };
                    let target = jit.emitter.code_end + rel as i64;
                    i = jit.emitter.index_of(target).ok_or(TraceError::BadTarget(target))?;
                    continue;
                }
                None
            }
            TraceOp::TrampolineJump => Some(bc),
            TraceOp::Exec { op, pc, next } => {
                let (op, pc, next) = (*op, *pc, *next);
                let r = vm.exec(op, pc);
                match resume(r, next, &mut bc) {
                    Ok(j) => j.filter(|_| next.is_some()),
                    Err(e) => break e,
                }
            }
            TraceOp::CCall { pc, next } | TraceOp::AllocFastPath { pc, next } => {
                let op = if matches!(ops[i], TraceOp::CCall { .. }) { Opcode::CCall } else { Opcode::MakeBlock };
                let (pc, next) = (*pc, *next);
                let r = vm.exec(op, pc);
                match resume(r, Some(next), &mut bc) {
                    Ok(j) => j,
                    Err(e) => break e,
                }
            }
            TraceOp::RaiseHelper => match vm.raise(vm.accu) {
                Ok(h) => Some(h),
                Err(e) => break e,
            },
            TraceOp::Halt => break Exit::Stop,
        };
        match jump_to {
            Some(pc) => i = trampoline(vm, jit, pc)?,
            None => i += 1,
        }
    };
    vm.counters.instructions = steps;
    Ok(exit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::interp::VmConfig;
    use crate::prims::Registry;

    fn run(src: &str, options: JitOptions) -> (Exit, Vm, TraceJit) {
        let seg = assemble(src).unwrap();
        let mut vm = Vm::new(&seg, &Registry::builtins(), &VmConfig::default()).unwrap();
        let mut jit = new_jit(options, seg.words.len()).unwrap();
        let start = jit.compile(&mut vm.code, 0).unwrap();
        let exit = execute(&mut vm, &mut jit, start).unwrap();
        (exit, vm, jit)
    }

    #[test]
    fn fig4_runs() {
        let (exit, vm, _) = run("CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3\nPOP 1\nSTOP", JitOptions::default());
        assert_eq!(exit, Exit::Stop);
        assert_eq!(vm.accu, Value::of_int(4));
    }

    #[test]
    fn halt_is_one_op() {
        let (_, _, jit) = run("STOP", JitOptions::default());
        assert_eq!(jit.emitter.ops, vec![TraceOp::Halt]);
        assert_eq!(jit.emitter.cursor(), TraceOp::Halt.size());
    }

    #[test]
    fn elision_removes_adjustments() {
        let src = "CONSTINT 2\nPUSH\nCONSTINT 5\nPUSH\nACC 1\nADDINT\nADDINT\nSTOP";
        let count = |jit: &TraceJit| jit.emitter.ops.iter().filter(|o| matches!(o, TraceOp::StackAdjust(_))).count();
        let (e1, vm1, on) = run(src, JitOptions::default());
        let (e2, vm2, off) = run(src, JitOptions { stack_elide: false, ..JitOptions::default() });
        assert_eq!((e1, vm1.accu, vm1.sp), (e2, vm2.accu, vm2.sp));
        assert_eq!(vm1.accu, Value::of_int(9));
        assert_eq!(count(&on), 0);
        assert!(count(&off) > 0);
    }

    #[test]
    fn template_count_matches_log() {
        let src = "CONSTINT 3\nBRANCHIFNOT l\nCONSTINT 4\nl: STOP";
        let seg = assemble(src).unwrap();
        let mut words = seg.words.clone();
        let mut jit = new_jit(JitOptions::default(), words.len()).unwrap();
        jit.ts.keep_log = true;
        jit.compile(&mut words, 0).unwrap();
        assert_eq!(jit.ts.log.len() as u64, jit.ts.stats.instructions);
        let starts: Vec<i64> = jit.ts.log.iter().map(|l| l.start).collect();
        assert!(starts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn closure_body_compiled_on_first_touch() {
        let src = "CONSTINT 7\nPUSH\nCLOSURE 0, f\nAPPLY 1\nSTOP\nf: ACC 0\nOFFSETINT 1\nRETURN 1";
        let seg = assemble(src).unwrap();
        let mut vm = Vm::new(&seg, &Registry::builtins(), &VmConfig::default()).unwrap();
        let mut jit = new_jit(JitOptions::default(), seg.words.len()).unwrap();
        let start = jit.compile(&mut vm.code, 0).unwrap();
        let f = 9;
        assert_eq!(vm.code[f], Opcode::Acc as i32);
        let exit = execute(&mut vm, &mut jit, start).unwrap();
        assert_eq!((exit, vm.accu), (Exit::Stop, Value::of_int(8)));
        assert!(vm.code[f] < 0);
        assert_eq!(jit.emitter.sled_entries, 1);
        assert_eq!(jit.ts.stats.compiles, 2);
    }

    #[test]
    fn unresolved_patch_is_reported() {
        let seg = assemble("CONSTINT 0\nBRANCH l\nl: STOP").unwrap();
        let mut vm = Vm::new(&seg, &Registry::builtins(), &VmConfig::default()).unwrap();
        let mut jit = new_jit(JitOptions::default(), seg.words.len()).unwrap();
        let start = jit.compile(&mut vm.code, 0).unwrap();
        for op in &mut jit.emitter.ops {
            if let TraceOp::Branch(_, s) = op {
                *s = Slot::Chain(Opcode::Stop as i32);
            }
        }
        assert!(matches!(execute(&mut vm, &mut jit, start), Err(TraceError::UnresolvedPatch { .. })));
    }

    #[test]
    fn arena_exhaustion() {
        let src = "CONSTINT 1\n".repeat(30) + "STOP";
        let mut words = assemble(&src).unwrap().words;
        let mut jit = new_jit(JitOptions { arena_size: 200, ..JitOptions::default() }, words.len()).unwrap();
        assert_eq!(jit.compile(&mut words, 0), Err(JitError::ArenaExhausted));
    }
}
