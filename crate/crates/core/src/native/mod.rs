//! x86-64 backend: templates, runtime stubs and the state record shared
//! between generated code and the runtime helpers.
//!
//! On other hosts only the encoder is built and [`NativeJit::new`] fails
//! with [`JitError::UnsupportedHost`].

pub mod x64;

#[cfg(target_arch = "x86_64")]
mod arena;
#[cfg(target_arch = "x86_64")]
mod emit;

#[cfg(target_arch = "x86_64")]
pub use emit::{NativeEmitter, Stubs};

use crate::interp::{Exit, Vm};
use crate::jit::{JitError, JitOptions};

/// Byte offsets of the [`State`] fields addressed by generated code.
pub mod off {
    pub const ACCU: i32 = 0;
    pub const ENV: i32 = 8;
    pub const SP: i32 = 16;
    pub const EXTRA_ARGS: i32 = 24;
    pub const YOUNG_PTR: i32 = 32;
    pub const MINOR_BASE: i32 = 40;
    pub const STACK_LIMIT: i32 = 48;
    pub const GLOBALS: i32 = 56;
    pub const WORDS: i32 = 64;
    pub const SIGNAL: i32 = 72;
    pub const SAVED_RSP: i32 = 80;
}

/// Machine state while generated code runs. The first eleven fields are
/// read and written by generated code at the offsets in [`off`]; `sp` and
/// `stack_limit` are addresses and `extra_args` is tagged.
#[repr(C)]
pub struct State {
    pub accu: u64,
    pub env: u64,
    pub sp: u64,
    pub extra_args: u64,
    pub young_ptr: u64,
    pub minor_base: u64,
    pub stack_limit: u64,
    pub globals: u64,
    pub words: u64,
    pub signal: u64,
    pub saved_rsp: u64,
    stack_base: u64,
    vm: *mut Vm,
    jit: *mut NativeJit,
    exit: Option<Exit>,
    error: Option<JitError>,
    panic: Option<Box<dyn std::any::Any + Send>>,
}

impl State {
    fn new(vm: &mut Vm, jit: *mut NativeJit) -> State {
        let stack_base = vm.stack.as_ptr() as u64;
        let mut st = State {
            accu: 0,
            env: 0,
            sp: 0,
            extra_args: 0,
            young_ptr: 0,
            minor_base: vm.heap.minor_base() as u64,
            stack_limit: stack_base + 8 * vm.stack_limit as u64,
            globals: vm.globals.as_ptr() as u64,
            words: vm.code.as_ptr() as u64,
            signal: std::sync::Arc::as_ptr(&vm.signal) as u64,
            saved_rsp: 0,
            stack_base,
            vm,
            jit,
            exit: None,
            error: None,
            panic: None,
        };
        st.store(vm);
        st
    }

    /// Copies the registers from the machine.
    fn store(&mut self, vm: &Vm) {
        self.accu = vm.accu.0;
        self.env = vm.env.0;
        self.sp = self.stack_base + 8 * vm.sp as u64;
        self.extra_args = 2 * vm.extra_args as u64 + 1;
        self.young_ptr = vm.heap.young_ptr() as u64;
    }

    /// Copies the registers back into the machine.
    fn load(&self, vm: &mut Vm) {
        use crate::value::Value;
        vm.accu = Value(self.accu);
        vm.env = Value(self.env);
        vm.sp = ((self.sp - self.stack_base) / 8) as usize;
        vm.extra_args = (self.extra_args >> 1) as usize;
        debug_assert!(self.young_ptr as usize <= vm.heap.young_ptr());
        vm.heap.set_young_ptr(self.young_ptr as usize);
    }
}

#[cfg(target_arch = "x86_64")]
mod host {
    use super::*;
    use crate::bytecode::Opcode;
    use crate::jit::Translator;
    use std::panic::{catch_unwind, AssertUnwindSafe};

    /// Executes one instruction on behalf of generated code. Returns the
    /// next pc, or -1 once the program has left (exit recorded in state).
    extern "C" fn h_exec(st: *mut State, op: u32, pc: u32) -> i64 {
        let st = unsafe { &mut *st };
        let r = catch_unwind(AssertUnwindSafe(|| {
            let vm = unsafe { &mut *st.vm };
            st.load(vm);
            let op = Opcode::from_word(op as i32).expect("opcode from template");
            let r = vm.exec(op, pc as usize);
            st.store(vm);
            r
        }));
        match r {
            Ok(Ok(next)) => next as i64,
            Ok(Err(exit)) => {
                st.exit = Some(exit);
                -1
            }
            Err(p) => {
                st.panic = Some(p);
                -1
            }
        }
    }

    /// Compile entry reached from the nop sled: translates the block whose
    /// opcode word is at `word` and returns its native address.
    extern "C" fn h_compile(word: *const i32, st: *mut State) -> u64 {
        let st = unsafe { &mut *st };
        let r = catch_unwind(AssertUnwindSafe(|| {
            let vm = unsafe { &mut *st.vm };
            let jit = unsafe { &mut *st.jit };
            let pc = (word as usize - vm.code.as_ptr() as usize) / 4;
            jit.sled_entries += 1;
            jit.compile(&mut vm.code, pc)
        }));
        let stop = unsafe { (*st.jit).tr.emitter.stubs.rt_stop } as u64;
        match r {
            Ok(Ok(addr)) => addr as u64,
            Ok(Err(e)) => {
                st.error = Some(e);
                stop
            }
            Err(p) => {
                st.panic = Some(p);
                stop
            }
        }
    }

    pub struct NativeJit {
        pub tr: Translator<NativeEmitter>,
        /// Compiles entered through the nop sled.
        pub sled_entries: u64,
    }

    impl NativeJit {
        pub fn new(options: JitOptions, vm: &Vm) -> Result<NativeJit, JitError> {
            let prims = vm.prims.entries.iter().map(|p| p.name).collect();
            let atom0 = vm.heap.atom(0).0 as i64;
            let e = NativeEmitter::new(
                options.arena_size,
                options.wx,
                prims,
                atom0,
                h_compile as *const () as usize,
                h_exec as *const () as usize,
            )?;
            Ok(NativeJit { tr: Translator::new(e, options, vm.code.len()), sled_entries: 0 })
        }

        pub fn compile(&mut self, words: &mut [i32], at: usize) -> Result<i64, JitError> {
            self.tr.emitter.arena.set_writable(true)?;
            let r = self.tr.compile(words, at);
            self.tr.emitter.arena.set_writable(false)?;
            r
        }

        pub fn lookup_native(&self, words: &[i32], at: usize) -> Option<i64> {
            self.tr.lookup_native(words, at)
        }

        pub fn code_bytes(&self) -> u64 {
            self.tr.emitter.code_bytes()
        }

        /// Runs from bytecode `pc`, compiling on demand.
        pub fn run(&mut self, vm: &mut Vm, pc: usize) -> Result<Exit, JitError> {
            self.tr.emitter.arena.set_writable(false)?;
            let entry = unsafe { vm.code.as_ptr().add(pc) };
            let me: *mut NativeJit = self;
            let mut st = State::new(vm, me);
            let start = self.tr.emitter.stubs.rt_start;
            // SAFETY: rt_start is the entry stub written by NativeEmitter::new.
            let rt_start: extern "C" fn(*mut State, *const i32) -> u64 = unsafe { std::mem::transmute(start) };
            rt_start(&mut st, entry);
            st.load(vm);
            if let Some(p) = st.panic.take() {
                std::panic::resume_unwind(p);
            }
            if let Some(e) = st.error.take() {
                return Err(e);
            }
            Ok(st.exit.take().unwrap_or(Exit::Stop))
        }

        /// Emission log with the bytes of each template.
        pub fn dump(&self) -> String {
            let e = &self.tr.emitter;
            let mut s = String::new();
            for l in &self.tr.ts.log {
                s += &format!(
                    "{:6} {:<16} {:08x}..{:08x}{} {}\n",
                    l.pc,
                    l.op.mnemonic(),
                    l.start - e.code_start(),
                    l.end - e.code_start(),
                    if l.mapped { " " } else { "*" },
                    e.dump_range(l.start, l.end)
                );
            }
            s
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub use host::NativeJit;

#[cfg(not(target_arch = "x86_64"))]
pub struct NativeJit {
    pub sled_entries: u64,
}

#[cfg(not(target_arch = "x86_64"))]
impl NativeJit {
    pub fn new(_: JitOptions, _: &Vm) -> Result<NativeJit, JitError> {
        Err(JitError::UnsupportedHost)
    }

    pub fn run(&mut self, _: &mut Vm, _: usize) -> Result<Exit, JitError> {
        Err(JitError::UnsupportedHost)
    }
}

#[cfg(all(test, target_arch = "x86_64"))]
mod tests;
