//! Machine state and the reference semantics of every instruction.
//!
//! [`Vm`] holds the virtual registers, the stack, globals and heap. Each
//! instruction is a method taking the pc of its opcode word and returning
//! the next pc; the switch and threaded interpreters, the trace evaluator
//! and the native runtime helpers all execute through these methods.

pub mod threaded;

use crate::bytecode::{Opcode, Segment, GlobalInit, NUM_OPCODES};
use crate::heap::{Heap, HeapConfig, HeapStats, RootSet};
use crate::prims::{PrimCtx, PrimError, PrimTable, Registry, UnknownPrimitive};
use crate::value::{Header, Value, CLOSURE_TAG, DOUBLE_ARRAY_TAG, DOUBLE_TAG, INFIX_TAG, NO_SCAN_TAG, STRING_TAG};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Minimum free slots required when a call pushes a frame.
pub const STACK_THRESHOLD: usize = 256;
/// Slots below the usable stack that absorb pushes between threshold checks.
pub const RED_ZONE: usize = 4096;
pub const DEFAULT_STACK_SLOTS: usize = 1 << 20;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    #[error("stack overflow")]
    StackOverflow,
    #[error("step budget exceeded")]
    StepBudgetExceeded,
    #[error("out of memory")]
    OutOfMemory,
    #[error("apply of a non-closure value")]
    ApplyNonClosure,
    #[error("field access on a non-block value")]
    NotABlock,
    #[error("field index out of bounds")]
    FieldOutOfBounds,
    #[error("bad environment access")]
    BadEnvAccess,
    #[error("switch value outside its table")]
    BadSwitch,
    #[error("invalid opcode word")]
    BadOpcode,
    #[error("unbalanced call frame")]
    FrameImbalance,
    #[error("primitive received an ill-typed argument")]
    PrimitiveType,
    #[error("native code fault")]
    Native,
}

/// Why execution left the dispatch loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Stop,
    Uncaught(Value),
    Fault(Fault),
}

type Step = Result<usize, Exit>;

#[inline]
fn fault<T>(f: Fault) -> Result<T, Exit> {
    Err(Exit::Fault(f))
}

/// Two-operand integer instructions other than DIVINT and MODINT, on raw
/// tagged words: `a` is the accumulator, `b` the popped stack top.
#[inline(always)]
pub fn int_op(op: Opcode, a: u64, b: u64) -> u64 {
    match op {
        Opcode::AddInt => a.wrapping_add(b).wrapping_sub(1),
        Opcode::SubInt => a.wrapping_sub(b).wrapping_add(1),
        Opcode::MulInt => Value::of_int_wrapping(Value(a).as_int().wrapping_mul(Value(b).as_int())).0,
        Opcode::AndInt => a & b,
        Opcode::OrInt => a | b,
        Opcode::XorInt => (a ^ b) | 1,
        Opcode::LslInt => (a.wrapping_sub(1) << (Value(b).as_int() as u32 & 63)).wrapping_add(1),
        Opcode::LsrInt => (a >> (Value(b).as_int() as u32 & 63)) | 1,
        Opcode::AsrInt => (((a as i64) >> (Value(b).as_int() as u32 & 63)) as u64) | 1,
        Opcode::Eq => Value::of_bool((a as i64) == (b as i64)).0,
        Opcode::Neq => Value::of_bool((a as i64) != (b as i64)).0,
        Opcode::LtInt => Value::of_bool((a as i64) < (b as i64)).0,
        Opcode::LeInt => Value::of_bool((a as i64) <= (b as i64)).0,
        Opcode::GtInt => Value::of_bool((a as i64) > (b as i64)).0,
        Opcode::GeInt => Value::of_bool((a as i64) >= (b as i64)).0,
        _ => unreachable!("{op} is not a pure integer operation"),
    }
}

#[derive(Clone, Debug)]
pub struct VmConfig {
    pub heap: HeapConfig,
    pub stack_slots: usize,
    pub step_budget: Option<u64>,
    /// Track call frames on a shadow stack and fault on imbalance.
    pub check_frames: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            heap: HeapConfig::default(),
            stack_slots: DEFAULT_STACK_SLOTS,
            step_budget: None,
            check_frames: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub instructions: u64,
    pub dispatches: u64,
    pub signals: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error(transparent)]
    UnknownPrimitive(#[from] UnknownPrimitive),
    #[error("primitive `{name}` declared with arity {got}, C_CALL passes {want}")]
    PrimArity { name: String, want: usize, got: usize },
    #[error("out of memory while loading globals")]
    OutOfMemory,
}

pub type SignalHook = Box<dyn FnMut(&mut Vec<u8>) + Send>;

pub struct Vm {
    pub code: Vec<i32>,
    pub accu: Value,
    pub env: Value,
    pub sp: usize,
    pub extra_args: usize,
    pub trap_sp: Option<usize>,
    pub stack: Stack,
    /// Lowest sp a call may start from.
    pub stack_limit: usize,
    pub globals: Vec<Value>,
    pub heap: Heap,
    pub prims: PrimTable,
    pub out: Vec<u8>,
    pub signal: Arc<AtomicBool>,
    pub on_signal: Option<SignalHook>,
    pub counters: Counters,
    pub budget: u64,
    div_by_zero: Value,
    frames: Option<Vec<usize>>,
}

/// Root set made of disjoint borrows of the machine registers.
pub struct VmRoots<'a> {
    accu: &'a mut Value,
    env: &'a mut Value,
    live: &'a mut [Value],
    globals: &'a mut [Value],
}

impl RootSet for VmRoots<'_> {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value)) {
        f(self.accu);
        f(self.env);
        for v in self.live.iter_mut() {
            f(v);
        }
        for v in self.globals.iter_mut() {
            f(v);
        }
    }
}

/// The value stack, mapped straight from the kernel so pages that are
/// never touched cost nothing.
pub struct Stack {
    ptr: std::ptr::NonNull<Value>,
    len: usize,
}

// SAFETY: Stack owns its mapping exclusively.
unsafe impl Send for Stack {}

impl Stack {
    pub fn zeroed(len: usize) -> Stack {
        let bytes = len.max(1) * std::mem::size_of::<Value>();
        // SAFETY: a fresh private anonymous mapping; the kernel zero-fills it.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                bytes,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            std::alloc::handle_alloc_error(std::alloc::Layout::array::<Value>(len.max(1)).expect("stack layout"));
        }
        Stack { ptr: std::ptr::NonNull::new(p.cast()).expect("mmap returned null"), len }
    }
}

impl std::ops::Deref for Stack {
    type Target = [Value];
    fn deref(&self) -> &[Value] {
        // SAFETY: ptr maps len zero-initialized words, and zero is a valid Value.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }
}

impl std::ops::DerefMut for Stack {
    fn deref_mut(&mut self) -> &mut [Value] {
        // SAFETY: as for deref, and &mut self is exclusive.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        // SAFETY: the mapping was created in Stack::zeroed with this size.
        unsafe { libc::munmap(self.ptr.as_ptr().cast(), self.len.max(1) * std::mem::size_of::<Value>()) };
    }
}

impl Vm {
    pub fn new(seg: &Segment, registry: &Registry, config: &VmConfig) -> Result<Vm, LoadError> {
        let prims = registry.resolve(&seg.prims)?;
        let mut heap = Heap::new(config.heap);
        let mut globals = Vec::with_capacity(seg.globals.len());
        for g in &seg.globals {
            globals.push(match g {
                GlobalInit::Int(n) => Value::of_int_wrapping(*n),
                GlobalInit::Unit => heap.atom(0),
                GlobalInit::Str(b) => heap.alloc_major_string(b).map_err(|_| LoadError::OutOfMemory)?,
            });
        }
        let div_by_zero = {
            let name = heap.alloc_major_string(b"Division_by_zero").map_err(|_| LoadError::OutOfMemory)?;
            let exn = heap.alloc_major(0, 1).map_err(|_| LoadError::OutOfMemory)?;
            unsafe { exn.init_field(0, name) };
            exn
        };
        let len = RED_ZONE + config.stack_slots.max(STACK_THRESHOLD);
        let env = heap.atom(0);
        Ok(Vm {
            code: seg.words.clone(),
            accu: Value::of_int(0),
            env,
            sp: len,
            extra_args: 0,
            trap_sp: None,
            stack: Stack::zeroed(len),
            stack_limit: RED_ZONE + STACK_THRESHOLD,
            globals,
            heap,
            prims,
            out: Vec::new(),
            signal: Arc::new(AtomicBool::new(false)),
            on_signal: None,
            counters: Counters::default(),
            budget: config.step_budget.unwrap_or(u64::MAX),
            div_by_zero,
            frames: config.check_frames.then(Vec::new),
        })
    }

    /// Checks each C_CALL against its primitive's declared arity.
    pub fn check_prim_arities(&self, seg: &Segment) -> Result<(), LoadError> {
        for (_, i) in seg.instructions().unwrap_or_default() {
            if i.op == Opcode::CCall {
                if let Some(p) = self.prims.entries.get(i.args[0] as usize) {
                    if p.arity != i.args[1] as usize {
                        return Err(LoadError::PrimArity {
                            name: p.name.to_string(),
                            want: i.args[1] as usize,
                            got: p.arity,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn stack_len(&self) -> usize {
        self.stack.len()
    }

    pub fn heap_stats(&self) -> HeapStats {
        self.heap.stats()
    }

    pub fn div_by_zero_exn(&self) -> Value {
        self.div_by_zero
    }

    pub fn roots(&mut self) -> (&mut Heap, VmRoots<'_>, &mut Vec<u8>) {
        let (sp, stack) = (self.sp, &mut self.stack);
        (
            &mut self.heap,
            VmRoots {
                accu: &mut self.accu,
                env: &mut self.env,
                live: &mut stack[sp..],
                globals: &mut self.globals,
            },
            &mut self.out,
        )
    }

    pub fn alloc(&mut self, tag: u8, size: usize) -> Result<Value, Exit> {
        self.alloc_keep(tag, size, &mut [])
    }

    /// Allocates with `keep` as additional roots.
    pub fn alloc_keep(&mut self, tag: u8, size: usize, keep: &mut [Value]) -> Result<Value, Exit> {
        let (heap, mut roots, _) = self.roots();
        heap.alloc(tag, size, &mut (&mut roots, keep))
            .map_err(|_| Exit::Fault(Fault::OutOfMemory))
    }

    pub fn minor_collect(&mut self) -> Result<(), Exit> {
        let (heap, mut roots, _) = self.roots();
        heap.minor_collect(&mut roots).map_err(|_| Exit::Fault(Fault::OutOfMemory))
    }

    fn alloc_string(&mut self, bytes: &[u8], keep: &mut [Value]) -> Result<Value, Exit> {
        let (heap, mut roots, _) = self.roots();
        heap.alloc_string(bytes, &mut (&mut roots, keep))
            .map_err(|_| Exit::Fault(Fault::OutOfMemory))
    }

    fn alloc_float(&mut self, d: f64) -> Result<Value, Exit> {
        let (heap, mut roots, _) = self.roots();
        heap.alloc_float(d, &mut roots).map_err(|_| Exit::Fault(Fault::OutOfMemory))
    }

    #[inline(always)]
    fn operand(&self, at: usize) -> i64 {
        self.code[at] as i64
    }

    #[inline(always)]
    fn pop(&mut self) -> Value {
        let v = self.stack[self.sp];
        self.sp += 1;
        v
    }

    #[inline(always)]
    fn push(&mut self, v: Value) -> Result<(), Exit> {
        if self.sp == 0 {
            return fault(Fault::StackOverflow);
        }
        self.sp -= 1;
        self.stack[self.sp] = v;
        Ok(())
    }

    #[inline(always)]
    fn slot(&self, n: i64) -> Result<Value, Exit> {
        match self.stack.get(self.sp + n as usize) {
            Some(v) => Ok(*v),
            None => fault(Fault::StackOverflow),
        }
    }

    /// Reserves `n` slots below sp.
    #[inline(always)]
    fn grow(&mut self, n: usize) -> Result<(), Exit> {
        if self.sp < n {
            return fault(Fault::StackOverflow);
        }
        self.sp -= n;
        Ok(())
    }

    // ---- exceptions ----

    /// Unwinds to the innermost trap frame, returning the handler pc.
    pub fn raise(&mut self, v: Value) -> Step {
        let Some(t) = self.trap_sp else {
            return Err(Exit::Uncaught(v));
        };
        let handler = self.stack[t].as_int() as usize;
        let prev = self.stack[t + 1].as_int();
        self.trap_sp = (prev >= 0).then_some(prev as usize);
        self.env = self.stack[t + 2];
        self.extra_args = self.stack[t + 3].as_int() as usize;
        self.sp = t + 4;
        self.accu = v;
        if let Some(frames) = &mut self.frames {
            while frames.last().is_some_and(|&f| f < t) {
                frames.pop();
            }
        }
        Ok(handler)
    }

    pub fn raise_div_by_zero(&mut self) -> Step {
        self.raise(self.div_by_zero)
    }

    /// Raises `Invalid_argument msg`, allocating the exception value.
    pub fn raise_invalid_argument(&mut self, msg: &str) -> Step {
        let name = self.alloc_string(b"Invalid_argument", &mut [])?;
        let mut keep = [name];
        let m = self.alloc_string(msg.as_bytes(), &mut keep)?;
        let mut keep = [keep[0], m];
        let exn = self.alloc_keep(0, 2, &mut keep)?;
        unsafe {
            exn.init_field(0, keep[0]);
            exn.init_field(1, keep[1]);
        }
        self.raise(exn)
    }

    fn prim_error(&mut self, e: PrimError) -> Step {
        match e {
            PrimError::Raise(v) => self.raise(v),
            PrimError::InvalidArgument(m) => self.raise_invalid_argument(m),
            PrimError::DivByZero => self.raise_div_by_zero(),
            PrimError::OutOfMemory => fault(Fault::OutOfMemory),
        }
    }

    // ---- frames ----

    #[inline(always)]
    fn frame_pushed(&mut self, at: usize) {
        if let Some(f) = &mut self.frames {
            f.push(at);
        }
    }

    #[inline(always)]
    fn frame_popped(&mut self, at: usize) -> Result<(), Exit> {
        if let Some(f) = &mut self.frames {
            if f.pop() != Some(at) {
                return fault(Fault::FrameImbalance);
            }
        }
        Ok(())
    }

    /// Pops a return frame at sp and resumes the caller.
    #[inline(always)]
    fn return_to_caller(&mut self) -> Step {
        self.frame_popped(self.sp)?;
        let pc = self.stack[self.sp].as_int() as usize;
        self.env = self.stack[self.sp + 1];
        self.extra_args = self.stack[self.sp + 2].as_int() as usize;
        self.sp += 3;
        Ok(pc)
    }

    // ---- value helpers ----

    /// Code index stored in a closure (or infix) block.
    #[inline(always)]
    pub fn closure_code(v: Value) -> Result<usize, Exit> {
        if v.is_block() {
            let t = unsafe { v.header() }.tag();
            if t == CLOSURE_TAG || t == INFIX_TAG {
                return Ok(unsafe { v.field(0) }.as_int() as usize);
            }
        }
        fault(Fault::ApplyNonClosure)
    }

    #[inline(always)]
    fn checked_field(v: Value, i: i64) -> Result<*mut Value, Exit> {
        if !v.is_block() {
            return fault(Fault::NotABlock);
        }
        let h = unsafe { v.header() };
        if i < 0 || i as usize >= h.size() || h.tag() >= NO_SCAN_TAG {
            return fault(Fault::FieldOutOfBounds);
        }
        Ok(unsafe { v.as_ptr().add(i as usize) })
    }

    /// Start of the enclosing block and word offset of `v` within it.
    fn enclosing(v: Value) -> (Value, usize) {
        let h = unsafe { v.header() };
        if h.tag() == INFIX_TAG {
            (Value(v.0 - 8 * h.size() as u64), h.size())
        } else {
            (v, 0)
        }
    }

    fn env_slot(&self, n: i64) -> Result<*mut Value, Exit> {
        let env = self.env;
        if !env.is_block() {
            return fault(Fault::BadEnvAccess);
        }
        let (block, off) = Vm::enclosing(env);
        let size = unsafe { block.header() }.size() as i64;
        let at = off as i64 + n;
        if at < 0 || at >= size {
            return fault(Fault::BadEnvAccess);
        }
        Ok(unsafe { env.as_ptr().offset(n as isize) })
    }

    #[inline(always)]
    fn vect_index(&mut self, v: Value, i: Value) -> Result<Option<usize>, Exit> {
        if !v.is_block() {
            return fault(Fault::NotABlock);
        }
        let h = unsafe { v.header() };
        if h.tag() >= NO_SCAN_TAG {
            return fault(Fault::NotABlock);
        }
        let i = i.as_int();
        Ok((i >= 0 && (i as usize) < h.size()).then_some(i as usize))
    }

    #[inline(always)]
    fn string_index(&mut self, v: Value, i: Value) -> Result<Option<usize>, Exit> {
        if !v.is_block() || unsafe { v.header() }.tag() != STRING_TAG {
            return fault(Fault::NotABlock);
        }
        let len = unsafe { crate::value::string_length(v) };
        let i = i.as_int();
        Ok((i >= 0 && (i as usize) < len).then_some(i as usize))
    }

    // ---- stack and loads ----

    #[inline(always)]
    pub fn op_acc(&mut self, pc: usize) -> Step {
        self.accu = self.slot(self.operand(pc + 1))?;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_push(&mut self, pc: usize) -> Step {
        self.push(self.accu)?;
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_pushacc(&mut self, pc: usize) -> Step {
        self.push(self.accu)?;
        self.accu = self.slot(self.operand(pc + 1))?;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_pop(&mut self, pc: usize) -> Step {
        self.sp += self.operand(pc + 1) as usize;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_assign(&mut self, pc: usize) -> Step {
        let n = self.operand(pc + 1) as usize;
        match self.stack.get_mut(self.sp + n) {
            Some(s) => *s = self.accu,
            None => return fault(Fault::StackOverflow),
        }
        self.accu = Value::UNIT;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_envacc(&mut self, pc: usize) -> Step {
        let p = self.env_slot(self.operand(pc + 1))?;
        self.accu = unsafe { *p };
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_constint(&mut self, pc: usize) -> Step {
        self.accu = Value::of_int(self.operand(pc + 1));
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_atom(&mut self, pc: usize) -> Step {
        self.accu = self.heap.atom(self.operand(pc + 1) as u8);
        Ok(pc + 2)
    }

    // ---- arithmetic ----

    #[inline(always)]
    pub fn op_offsetint(&mut self, pc: usize) -> Step {
        self.accu = Value(self.accu.0.wrapping_add((self.operand(pc + 1) as u64) << 1));
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_negint(&mut self, pc: usize) -> Step {
        self.accu = Value(2u64.wrapping_sub(self.accu.0));
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_boolnot(&mut self, pc: usize) -> Step {
        self.accu = Value(4u64.wrapping_sub(self.accu.0));
        Ok(pc + 1)
    }

    #[inline(always)]
    fn binop(&mut self, pc: usize, f: impl FnOnce(u64, u64) -> u64) -> Step {
        let b = self.pop();
        self.accu = Value(f(self.accu.0, b.0));
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_addint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::AddInt, a, b))
    }

    #[inline(always)]
    pub fn op_subint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::SubInt, a, b))
    }

    #[inline(always)]
    pub fn op_mulint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::MulInt, a, b))
    }

    #[inline(always)]
    pub fn op_divint(&mut self, pc: usize) -> Step {
        let b = self.pop();
        if b.as_int() == 0 {
            return self.raise_div_by_zero();
        }
        self.accu = Value::of_int_wrapping(self.accu.as_int().wrapping_div(b.as_int()));
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_modint(&mut self, pc: usize) -> Step {
        let b = self.pop();
        if b.as_int() == 0 {
            return self.raise_div_by_zero();
        }
        self.accu = Value::of_int_wrapping(self.accu.as_int().wrapping_rem(b.as_int()));
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_andint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::AndInt, a, b))
    }

    #[inline(always)]
    pub fn op_orint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::OrInt, a, b))
    }

    #[inline(always)]
    pub fn op_xorint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::XorInt, a, b))
    }

    #[inline(always)]
    pub fn op_lslint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::LslInt, a, b))
    }

    #[inline(always)]
    pub fn op_lsrint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::LsrInt, a, b))
    }

    #[inline(always)]
    pub fn op_asrint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::AsrInt, a, b))
    }

    #[inline(always)]
    pub fn op_eq(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::Eq, a, b))
    }

    #[inline(always)]
    pub fn op_neq(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::Neq, a, b))
    }

    #[inline(always)]
    pub fn op_ltint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::LtInt, a, b))
    }

    #[inline(always)]
    pub fn op_leint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::LeInt, a, b))
    }

    #[inline(always)]
    pub fn op_gtint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::GtInt, a, b))
    }

    #[inline(always)]
    pub fn op_geint(&mut self, pc: usize) -> Step {
        self.binop(pc, |a, b| int_op(Opcode::GeInt, a, b))
    }

    #[inline(always)]
    pub fn op_isint(&mut self, pc: usize) -> Step {
        self.accu = Value::of_bool(self.accu.is_int());
        Ok(pc + 1)
    }

    // ---- application ----

    #[inline(always)]
    pub fn op_apply(&mut self, pc: usize) -> Step {
        let n = self.operand(pc + 1) as usize;
        let code = Vm::closure_code(self.accu)?;
        if self.sp < self.stack_limit {
            return fault(Fault::StackOverflow);
        }
        let sp = self.sp;
        self.stack.copy_within(sp..sp + n, sp - 3);
        self.sp = sp - 3;
        let frame = self.sp + n;
        self.stack[frame] = Value::of_int((pc + 2) as i64);
        self.stack[frame + 1] = self.env;
        self.stack[frame + 2] = Value::of_int(self.extra_args as i64);
        self.frame_pushed(frame);
        self.env = self.accu;
        self.extra_args = n - 1;
        Ok(code)
    }

    #[inline(always)]
    pub fn op_appterm(&mut self, pc: usize) -> Step {
        let n = self.operand(pc + 1) as usize;
        let size = self.operand(pc + 2) as usize;
        let code = Vm::closure_code(self.accu)?;
        if self.sp < self.stack_limit {
            return fault(Fault::StackOverflow);
        }
        let sp = self.sp;
        let newsp = sp + size - n;
        self.stack.copy_within(sp..sp + n, newsp);
        self.sp = newsp;
        self.env = self.accu;
        self.extra_args += n - 1;
        Ok(code)
    }

    #[inline(always)]
    pub fn op_return(&mut self, pc: usize) -> Step {
        self.sp += self.operand(pc + 1) as usize;
        if self.extra_args > 0 {
            let code = Vm::closure_code(self.accu)?;
            self.extra_args -= 1;
            self.env = self.accu;
            Ok(code)
        } else {
            self.return_to_caller()
        }
    }

    pub fn op_restart(&mut self, pc: usize) -> Step {
        let env = self.env;
        let n = unsafe { env.header() }.size() - 2;
        self.grow(n)?;
        for i in 0..n {
            self.stack[self.sp + i] = unsafe { env.field(i + 2) };
        }
        self.env = unsafe { env.field(1) };
        self.extra_args += n;
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_grab(&mut self, pc: usize) -> Step {
        let required = self.operand(pc + 1) as usize;
        if self.extra_args >= required {
            self.extra_args -= required;
            return Ok(pc + 2);
        }
        self.grab_partial(pc)
    }

    /// Builds the closure for an under-applied function and returns it.
    pub fn grab_partial(&mut self, pc: usize) -> Step {
        let n = 1 + self.extra_args;
        let clo = self.alloc(CLOSURE_TAG, n + 2)?;
        unsafe {
            clo.init_field(0, Value::of_int(pc as i64 - 1));
            clo.init_field(1, self.env);
            for i in 0..n {
                clo.init_field(i + 2, self.stack[self.sp + i]);
            }
        }
        self.sp += n;
        self.accu = clo;
        self.return_to_caller()
    }

    #[inline(always)]
    pub fn op_closure(&mut self, pc: usize) -> Step {
        let nvars = self.operand(pc + 1) as usize;
        let code = pc as i64 + 2 + self.operand(pc + 2);
        if nvars > 0 {
            self.push(self.accu)?;
        }
        let clo = self.alloc(CLOSURE_TAG, 1 + nvars)?;
        unsafe {
            clo.init_field(0, Value::of_int(code));
            for i in 0..nvars {
                clo.init_field(i + 1, self.stack[self.sp + i]);
            }
        }
        self.sp += nvars;
        self.accu = clo;
        Ok(pc + 3)
    }

    pub fn op_closurerec(&mut self, pc: usize) -> Step {
        let nfuncs = self.operand(pc + 1) as usize;
        let nvars = self.operand(pc + 2) as usize;
        let table = pc + 3;
        if nvars > 0 {
            self.push(self.accu)?;
        }
        let size = 2 * nfuncs - 1 + nvars;
        let clo = self.alloc(CLOSURE_TAG, size)?;
        unsafe {
            clo.init_field(0, Value::of_int(table as i64 + self.operand(table)));
            for i in 1..nfuncs {
                clo.init_field(2 * i - 1, Value(Header::new(INFIX_TAG, 2 * i, 0).0));
                clo.init_field(2 * i, Value::of_int(table as i64 + self.operand(table + i)));
            }
            for j in 0..nvars {
                clo.init_field(2 * nfuncs - 1 + j, self.stack[self.sp + j]);
            }
        }
        if size > crate::heap::MAX_YOUNG_WOSIZE {
            for j in 0..nvars {
                let slot = unsafe { clo.as_ptr().add(2 * nfuncs - 1 + j) };
                self.heap.remember(slot, unsafe { *slot });
            }
        }
        self.sp += nvars;
        self.accu = clo;
        for i in 0..nfuncs {
            self.push(Value(clo.0 + 16 * i as u64))?;
        }
        Ok(table + nfuncs)
    }

    #[inline(always)]
    pub fn op_offsetclosure(&mut self, pc: usize) -> Step {
        let n = self.operand(pc + 1);
        let env = self.env;
        if !env.is_block() {
            return fault(Fault::BadEnvAccess);
        }
        let (block, off) = Vm::enclosing(env);
        let target = off as i64 + n;
        let size = unsafe { block.header() }.size() as i64;
        let ok = target == 0
            || (target > 0
                && target < size
                && Header(unsafe { block.field(target as usize - 1) }.0).tag() == INFIX_TAG);
        if !ok {
            return fault(Fault::BadEnvAccess);
        }
        self.accu = Value((env.0 as i64 + 8 * n) as u64);
        Ok(pc + 2)
    }

    // ---- allocation ----

    #[inline(always)]
    pub fn op_makeblock(&mut self, pc: usize) -> Step {
        let tag = self.operand(pc + 1) as u8;
        let size = self.operand(pc + 2) as usize;
        if size == 0 {
            self.accu = self.heap.atom(tag);
            return Ok(pc + 3);
        }
        let b = self.alloc(tag, size)?;
        unsafe {
            b.init_field(0, self.accu);
            for i in 1..size {
                b.init_field(i, self.stack[self.sp + i - 1]);
            }
        }
        if size > crate::heap::MAX_YOUNG_WOSIZE {
            for i in 0..size {
                let slot = unsafe { b.as_ptr().add(i) };
                self.heap.remember(slot, unsafe { *slot });
            }
        }
        self.sp += size - 1;
        self.accu = b;
        Ok(pc + 3)
    }

    pub fn op_makefloatblock(&mut self, pc: usize) -> Step {
        let size = self.operand(pc + 1) as usize;
        if size == 0 {
            self.accu = self.heap.atom(0);
            return Ok(pc + 2);
        }
        let b = self.alloc(DOUBLE_ARRAY_TAG, size)?;
        let first = Vm::float_of(self.accu)?;
        unsafe { b.set_double_field(0, first) };
        for i in 1..size {
            let d = Vm::float_of(self.stack[self.sp + i - 1])?;
            unsafe { b.set_double_field(i, d) };
        }
        self.sp += size - 1;
        self.accu = b;
        Ok(pc + 2)
    }

    fn float_of(v: Value) -> Result<f64, Exit> {
        if v.is_block() && unsafe { v.header() }.tag() == DOUBLE_TAG {
            Ok(unsafe { v.double() })
        } else {
            fault(Fault::NotABlock)
        }
    }

    // ---- fields and globals ----

    #[inline(always)]
    pub fn op_getglobal(&mut self, pc: usize) -> Step {
        self.accu = self.globals[self.operand(pc + 1) as usize];
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_setglobal(&mut self, pc: usize) -> Step {
        let n = self.operand(pc + 1) as usize;
        self.globals[n] = self.accu;
        self.accu = Value::UNIT;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_getglobalfield(&mut self, pc: usize) -> Step {
        let g = self.globals[self.operand(pc + 1) as usize];
        self.accu = unsafe { *Vm::checked_field(g, self.operand(pc + 2))? };
        Ok(pc + 3)
    }

    #[inline(always)]
    pub fn op_getfield(&mut self, pc: usize) -> Step {
        self.accu = unsafe { *Vm::checked_field(self.accu, self.operand(pc + 1))? };
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_setfield(&mut self, pc: usize) -> Step {
        let slot = Vm::checked_field(self.accu, self.operand(pc + 1))?;
        let v = self.pop();
        unsafe { self.heap.modify(slot, v) };
        self.accu = Value::UNIT;
        Ok(pc + 2)
    }

    fn float_slot(v: Value, i: i64) -> Result<usize, Exit> {
        if !v.is_block() {
            return fault(Fault::NotABlock);
        }
        let h = unsafe { v.header() };
        if h.tag() != DOUBLE_ARRAY_TAG || i < 0 || i as usize >= h.size() {
            return fault(Fault::FieldOutOfBounds);
        }
        Ok(i as usize)
    }

    pub fn op_getfloatfield(&mut self, pc: usize) -> Step {
        let i = Vm::float_slot(self.accu, self.operand(pc + 1))?;
        let d = unsafe { self.accu.double_field(i) };
        self.accu = self.alloc_float(d)?;
        Ok(pc + 2)
    }

    pub fn op_setfloatfield(&mut self, pc: usize) -> Step {
        let i = Vm::float_slot(self.accu, self.operand(pc + 1))?;
        let d = Vm::float_of(self.pop())?;
        unsafe { self.accu.set_double_field(i, d) };
        self.accu = Value::UNIT;
        Ok(pc + 2)
    }

    #[inline(always)]
    pub fn op_getstringchar(&mut self, pc: usize) -> Step {
        let i = self.pop();
        match self.string_index(self.accu, i)? {
            Some(i) => {
                self.accu = Value::of_int(unsafe { self.accu.string_bytes() }[i] as i64);
                Ok(pc + 1)
            }
            None => self.raise_invalid_argument("index out of bounds"),
        }
    }

    #[inline(always)]
    pub fn op_setstringchar(&mut self, pc: usize) -> Step {
        let i = self.pop();
        let c = self.pop();
        match self.string_index(self.accu, i)? {
            Some(i) => {
                unsafe { self.accu.string_bytes_mut()[i] = c.as_int() as u8 };
                self.accu = Value::UNIT;
                Ok(pc + 1)
            }
            None => self.raise_invalid_argument("index out of bounds"),
        }
    }

    #[inline(always)]
    pub fn op_vectlength(&mut self, pc: usize) -> Step {
        if !self.accu.is_block() {
            return fault(Fault::NotABlock);
        }
        self.accu = Value::of_int(unsafe { self.accu.header() }.size() as i64);
        Ok(pc + 1)
    }

    #[inline(always)]
    pub fn op_getvectitem(&mut self, pc: usize) -> Step {
        let i = self.pop();
        match self.vect_index(self.accu, i)? {
            Some(i) => {
                self.accu = unsafe { self.accu.field(i) };
                Ok(pc + 1)
            }
            None => self.raise_invalid_argument("index out of bounds"),
        }
    }

    #[inline(always)]
    pub fn op_setvectitem(&mut self, pc: usize) -> Step {
        let i = self.pop();
        let v = self.pop();
        match self.vect_index(self.accu, i)? {
            Some(i) => {
                unsafe { self.heap.modify(self.accu.as_ptr().add(i), v) };
                self.accu = Value::UNIT;
                Ok(pc + 1)
            }
            None => self.raise_invalid_argument("index out of bounds"),
        }
    }

    // ---- control ----

    #[inline(always)]
    pub fn op_branch(&mut self, pc: usize) -> Step {
        Ok((pc as i64 + 1 + self.operand(pc + 1)) as usize)
    }

    #[inline(always)]
    pub fn op_branchif(&mut self, pc: usize) -> Step {
        if self.accu != Value::FALSE {
            self.op_branch(pc)
        } else {
            Ok(pc + 2)
        }
    }

    #[inline(always)]
    pub fn op_branchifnot(&mut self, pc: usize) -> Step {
        if self.accu == Value::FALSE {
            self.op_branch(pc)
        } else {
            Ok(pc + 2)
        }
    }

    #[inline(always)]
    fn cond_branch(&mut self, pc: usize, f: impl FnOnce(i64, i64) -> bool) -> Step {
        if f(self.operand(pc + 1), self.accu.as_int()) {
            Ok((pc as i64 + 2 + self.operand(pc + 2)) as usize)
        } else {
            Ok(pc + 3)
        }
    }

    #[inline(always)]
    pub fn op_beq(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v == a)
    }

    #[inline(always)]
    pub fn op_bneq(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v != a)
    }

    #[inline(always)]
    pub fn op_bltint(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v < a)
    }

    #[inline(always)]
    pub fn op_bleint(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v <= a)
    }

    #[inline(always)]
    pub fn op_bgtint(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v > a)
    }

    #[inline(always)]
    pub fn op_bgeint(&mut self, pc: usize) -> Step {
        self.cond_branch(pc, |v, a| v >= a)
    }

    #[inline(always)]
    pub fn op_switch(&mut self, pc: usize) -> Step {
        let packed = self.code[pc + 1] as u32;
        let (nints, ntags) = ((packed & 0xFFFF) as usize, (packed >> 16) as usize);
        let table = pc + 2;
        let idx = if self.accu.is_int() {
            let i = self.accu.as_int();
            if i < 0 || i as usize >= nints {
                return fault(Fault::BadSwitch);
            }
            i as usize
        } else {
            let t = unsafe { self.accu.header() }.tag() as usize;
            if t >= ntags {
                return fault(Fault::BadSwitch);
            }
            nints + t
        };
        Ok((table as i64 + self.operand(table + idx)) as usize)
    }

    pub fn op_pushtrap(&mut self, pc: usize) -> Step {
        let handler = pc as i64 + 1 + self.operand(pc + 1);
        self.grow(4)?;
        let sp = self.sp;
        self.stack[sp] = Value::of_int(handler);
        self.stack[sp + 1] = Value::of_int(self.trap_sp.map_or(-1, |t| t as i64));
        self.stack[sp + 2] = self.env;
        self.stack[sp + 3] = Value::of_int(self.extra_args as i64);
        self.trap_sp = Some(sp);
        Ok(pc + 2)
    }

    pub fn op_poptrap(&mut self, pc: usize) -> Step {
        let prev = self.stack[self.sp + 1].as_int();
        self.trap_sp = (prev >= 0).then_some(prev as usize);
        self.sp += 4;
        Ok(pc + 1)
    }

    pub fn op_raise(&mut self, _pc: usize) -> Step {
        self.raise(self.accu)
    }

    #[inline(always)]
    pub fn op_check_signals(&mut self, pc: usize) -> Step {
        if self.signal.load(Ordering::Relaxed) {
            self.service_signal();
        }
        Ok(pc + 1)
    }

    /// Clears the pending flag and runs the registered hook once.
    pub fn service_signal(&mut self) {
        if self.signal.swap(false, Ordering::AcqRel) {
            self.counters.signals += 1;
            if let Some(h) = &mut self.on_signal {
                h(&mut self.out);
            }
        }
    }

    pub fn op_ccall(&mut self, pc: usize) -> Step {
        let p = self.operand(pc + 1) as usize;
        let n = self.operand(pc + 2) as usize;
        match self.call_prim(p, n) {
            Ok(()) => Ok(pc + 3),
            Err(e) => self.prim_error(e),
        }
    }

    /// Calls primitive `p` on accu and `n - 1` stack slots, popping them and
    /// leaving the result in accu.
    pub fn call_prim(&mut self, p: usize, n: usize) -> Result<(), PrimError> {
        let prim = self.prims.entries[p];
        let mut args = [Value::UNIT; crate::prims::MAX_PRIM_ARITY];
        args[0] = self.accu;
        args[1..n].copy_from_slice(&self.stack[self.sp..self.sp + n - 1]);
        let r = {
            let (heap, mut roots, out) = self.roots();
            let mut ctx = PrimCtx { heap, out, roots: &mut roots };
            (prim.f)(&mut ctx, &mut args[..n])
        };
        self.sp += n - 1;
        self.accu = r?;
        Ok(())
    }

    pub fn op_getmethod(&mut self, pc: usize) -> Step {
        let obj = self.stack[self.sp];
        let table = unsafe { *Vm::checked_field(obj, 0)? };
        self.accu = unsafe { *Vm::checked_field(table, self.accu.as_int())? };
        Ok(pc + 1)
    }

    pub fn op_stop(&mut self, _pc: usize) -> Step {
        Err(Exit::Stop)
    }

    /// Executes the instruction at `pc`.
    #[inline(always)]
    pub fn step(&mut self, pc: usize) -> Step {
        let w = self.code[pc];
        if (w as u32) >= NUM_OPCODES as u32 {
            return fault(Fault::BadOpcode);
        }
        // SAFETY: Opcode is a dense repr(u8) enum of NUM_OPCODES variants.
        let op: Opcode = unsafe { std::mem::transmute(w as u8) };
        self.exec(op, pc)
    }

    #[inline(always)]
    pub fn exec(&mut self, op: Opcode, pc: usize) -> Step {
        use Opcode::*;
        match op {
            Acc => self.op_acc(pc),
            Push => self.op_push(pc),
            PushAcc => self.op_pushacc(pc),
            Pop => self.op_pop(pc),
            Assign => self.op_assign(pc),
            EnvAcc => self.op_envacc(pc),
            ConstInt => self.op_constint(pc),
            Atom => self.op_atom(pc),
            OffsetInt => self.op_offsetint(pc),
            NegInt => self.op_negint(pc),
            BoolNot => self.op_boolnot(pc),
            AddInt => self.op_addint(pc),
            SubInt => self.op_subint(pc),
            MulInt => self.op_mulint(pc),
            DivInt => self.op_divint(pc),
            ModInt => self.op_modint(pc),
            AndInt => self.op_andint(pc),
            OrInt => self.op_orint(pc),
            XorInt => self.op_xorint(pc),
            LslInt => self.op_lslint(pc),
            LsrInt => self.op_lsrint(pc),
            AsrInt => self.op_asrint(pc),
            Eq => self.op_eq(pc),
            Neq => self.op_neq(pc),
            LtInt => self.op_ltint(pc),
            LeInt => self.op_leint(pc),
            GtInt => self.op_gtint(pc),
            GeInt => self.op_geint(pc),
            IsInt => self.op_isint(pc),
            Apply => self.op_apply(pc),
            AppTerm => self.op_appterm(pc),
            Return => self.op_return(pc),
            Restart => self.op_restart(pc),
            Grab => self.op_grab(pc),
            Closure => self.op_closure(pc),
            ClosureRec => self.op_closurerec(pc),
            OffsetClosure => self.op_offsetclosure(pc),
            MakeBlock => self.op_makeblock(pc),
            MakeFloatBlock => self.op_makefloatblock(pc),
            GetGlobal => self.op_getglobal(pc),
            SetGlobal => self.op_setglobal(pc),
            GetGlobalField => self.op_getglobalfield(pc),
            GetField => self.op_getfield(pc),
            SetField => self.op_setfield(pc),
            GetFloatField => self.op_getfloatfield(pc),
            SetFloatField => self.op_setfloatfield(pc),
            GetStringChar => self.op_getstringchar(pc),
            SetStringChar => self.op_setstringchar(pc),
            VectLength => self.op_vectlength(pc),
            GetVectItem => self.op_getvectitem(pc),
            SetVectItem => self.op_setvectitem(pc),
            Branch => self.op_branch(pc),
            BranchIf => self.op_branchif(pc),
            BranchIfNot => self.op_branchifnot(pc),
            Beq => self.op_beq(pc),
            Bneq => self.op_bneq(pc),
            BltInt => self.op_bltint(pc),
            BleInt => self.op_bleint(pc),
            BgtInt => self.op_bgtint(pc),
            BgeInt => self.op_bgeint(pc),
            Switch => self.op_switch(pc),
            PushTrap => self.op_pushtrap(pc),
            PopTrap => self.op_poptrap(pc),
            Raise => self.op_raise(pc),
            CheckSignals => self.op_check_signals(pc),
            CCall => self.op_ccall(pc),
            GetMethod => self.op_getmethod(pc),
            Stop => self.op_stop(pc),
        }
    }

    /// Switch-dispatch interpreter loop starting at `pc`.
    pub fn run_switch(&mut self, mut pc: usize) -> Exit {
        let mut steps = self.counters.instructions;
        let budget = self.budget;
        let exit = loop {
            if steps >= budget {
                break Exit::Fault(Fault::StepBudgetExceeded);
            }
            steps += 1;
            match self.step(pc) {
                Ok(next) => pc = next,
                Err(e) => break e,
            }
        };
        self.counters.instructions = steps;
        self.counters.dispatches = steps;
        exit
    }
}
