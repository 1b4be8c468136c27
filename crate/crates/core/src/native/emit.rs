//! x86-64 templates and the fixed runtime stubs.
//!
//! Register plan: accu in rax, env in r12, extra_args (tagged) in r13, sp in
//! r14, the minor-heap cursor in r15 and the state record in rbp. rbx carries
//! accu across the compile trampoline; rcx, rdx, rsi, rdi and r8-r11 are
//! scratch. Generated code runs with rsp 16-byte aligned.

use super::arena::Arena;
use super::x64::{fits_i32, m, Alu, Asm, Cc, Mem, Reg, Shift, Sse, Xmm};
use super::off;
use crate::bytecode::{Instr, Opcode, NUM_OPCODES};
use crate::jit::{Cx, Emitter, JitError, MAX_ARENA_SIZE};
use crate::value::{Header, CLOSURE_TAG, DOUBLE_TAG, INFIX_TAG, NO_SCAN_TAG};
use Reg::*;

/// Absolute addresses of the stubs placed at the start of the arena.
#[derive(Clone, Copy, Debug)]
pub struct Stubs {
    pub rt_start: i64,
    pub rt_stop: i64,
    pub exec: i64,
    pub dispatch: i64,
    pub compile_trampoline: i64,
}

// Data cells at the arena base.
const CODE_END_CELL: i64 = 0;
const COMPILE_CELL: i64 = 8;
const EXEC_CELL: i64 = 16;
const STUBS_AT: i64 = 64;

/// Largest APPLY/APPTERM argument count handled inline.
const MAX_INLINE_ARGS: i64 = 16;

pub struct NativeEmitter {
    pub arena: Arena,
    cursor: i64,
    code_start: i64,
    code_end: i64,
    pub stubs: Stubs,
    prims: Vec<&'static str>,
    atom0: i64,
    /// Call sites emitted, each checked for 16-byte stack alignment.
    pub aligned_calls: u64,
}

fn slot(o: i32) -> Mem {
    m(R14, 8 * o)
}

fn spill(a: &mut Asm) {
    a.mov_mr(m(Rbp, off::ACCU), Rax);
    a.mov_mr(m(Rbp, off::ENV), R12);
    a.mov_mr(m(Rbp, off::SP), R14);
    a.mov_mr(m(Rbp, off::EXTRA_ARGS), R13);
    a.mov_mr(m(Rbp, off::YOUNG_PTR), R15);
}

fn reload(a: &mut Asm) {
    a.mov_rm(Rax, m(Rbp, off::ACCU));
    a.mov_rm(R12, m(Rbp, off::ENV));
    a.mov_rm(R14, m(Rbp, off::SP));
    a.mov_rm(R13, m(Rbp, off::EXTRA_ARGS));
    a.mov_rm(R15, m(Rbp, off::YOUNG_PTR));
}

impl NativeEmitter {
    pub fn new(
        arena_size: usize,
        wx: bool,
        prims: Vec<&'static str>,
        atom0: i64,
        compile_fn: usize,
        exec_fn: usize,
    ) -> Result<NativeEmitter, JitError> {
        if !(4096..=MAX_ARENA_SIZE).contains(&arena_size) {
            return Err(JitError::ArenaSize(arena_size));
        }
        let mut arena = Arena::new(arena_size, wx)?;
        let base = arena.base();
        let cell = |c: i64| Mem::Rip(base + c);

        let tramp_len = Self::compile_trampoline(&mut Asm::new(base), base).len() as i64;
        let code_end = base + arena_size as i64 - NUM_OPCODES as i64 - tramp_len;

        let mut a = Asm::new(base + STUBS_AT);
        let rt_start = a.here();
        for r in [Rbx, Rbp, R12, R13, R14, R15] {
            a.push(r);
        }
        a.alu_ri(Alu::Sub, Rsp, 8);
        a.mov_rr(Rbp, Rdi);
        a.mov_mr(m(Rbp, off::SAVED_RSP), Rsp);
        a.mov_rr(Rdx, Rsi);
        reload(&mut a);
        Self::bytecode_jump(&mut a, base);

        let rt_stop = a.here();
        spill(&mut a);
        a.mov_rm(Rsp, m(Rbp, off::SAVED_RSP));
        a.alu_ri(Alu::Add, Rsp, 8);
        for r in [R15, R14, R13, R12, Rbp, Rbx] {
            a.pop(r);
        }
        a.ret();

        // Entered by call from generated code, so rsp is 8 off alignment.
        let exec = a.here();
        spill(&mut a);
        a.mov_rr(Rdi, Rbp);
        a.alu_ri(Alu::Sub, Rsp, 8);
        a.call_m(cell(EXEC_CELL));
        a.alu_ri(Alu::Add, Rsp, 8);
        a.mov_rr(Rcx, Rax);
        reload(&mut a);
        a.ret();

        // rcx: next bytecode pc, or negative to leave.
        let dispatch = a.here();
        a.test_rr(Rcx, Rcx);
        a.jcc(Cc::S, rt_stop);
        a.mov_rm(Rdx, m(Rbp, off::WORDS));
        a.lea(Rdx, Mem::Index(Rdx, Rcx, 4, 0));
        Self::bytecode_jump(&mut a, base);
        let stub_bytes = a.buf;

        let mut tail = Asm::new(code_end);
        for _ in 0..NUM_OPCODES {
            tail.nop();
        }
        let compile_trampoline = tail.here();
        Self::compile_trampoline(&mut tail, base);
        debug_assert_eq!(tail.here(), base + arena_size as i64);

        arena.write(base + CODE_END_CELL, &(code_end as u64).to_le_bytes());
        arena.write(base + COMPILE_CELL, &(compile_fn as u64).to_le_bytes());
        arena.write(base + EXEC_CELL, &(exec_fn as u64).to_le_bytes());
        arena.write(base + STUBS_AT, &stub_bytes);
        arena.write(code_end, &tail.buf);
        let code_start = (base + STUBS_AT + stub_bytes.len() as i64 + 15) & !15;
        Ok(NativeEmitter {
            arena,
            cursor: code_start,
            code_start,
            code_end,
            stubs: Stubs { rt_start, rt_stop, exec, dispatch, compile_trampoline },
            prims,
            atom0,
            aligned_calls: 0,
        })
    }

    /// Jumps to the native code for the bytecode word at `[rdx]`: a
    /// sign-extending load of the word, plus code_end, then an indirect jump.
    fn bytecode_jump(a: &mut Asm, base: i64) {
        a.movsxd(Rcx, m(Rdx, 0));
        a.alu_rm(Alu::Add, Rcx, Mem::Rip(base + CODE_END_CELL));
        a.jmp_r(Rcx);
    }

    /// Reached through the nop sled with the bytecode address in rdx.
    fn compile_trampoline(a: &mut Asm, base: i64) -> &mut Asm {
        a.mov_rr(Rbx, Rax);
        a.mov_rr(Rdi, Rdx);
        a.mov_rr(Rsi, Rbp);
        a.call_m(Mem::Rip(base + COMPILE_CELL));
        a.xchg(Rax, Rbx);
        a.jmp_r(Rbx);
        a
    }

    pub fn code_start(&self) -> i64 {
        self.code_start
    }

    pub fn code_bytes(&self) -> u64 {
        (self.cursor - self.code_start) as u64
    }

    fn asm(&self) -> Asm {
        Asm::new(self.cursor)
    }

    /// Copies `a` to the cursor and returns its start address.
    fn put(&mut self, a: Asm) -> Result<i64, JitError> {
        let start = self.cursor;
        if start + a.len() as i64 > self.code_end {
            return Err(JitError::ArenaExhausted);
        }
        self.arena.write(start, &a.buf);
        self.cursor += a.len() as i64;
        Ok(start)
    }

    /// Call from generated code, where rsp is 16-byte aligned.
    fn call_aligned(&mut self, a: &mut Asm, target: i64, depth: i64) {
        assert_eq!(depth % 16, 0, "misaligned call site");
        self.aligned_calls += 1;
        a.call(target);
    }

    /// Runs the instruction through the runtime helper. With `next`, falls
    /// through when the helper returns it; otherwise always dispatches.
    /// `before` and `after` are the stack offsets the surrounding code
    /// assumes on entry and on fall-through.
    fn exec(&mut self, a: &mut Asm, op: Opcode, pc: usize, next: Option<usize>, before: i32, after: i32) {
        if before != 0 {
            a.lea(R14, slot(before));
        }
        a.mov_ri(Rsi, op as i64);
        a.mov_ri(Rdx, pc as i64);
        self.call_aligned(a, self.stubs.exec, 0);
        match next {
            Some(n) => {
                a.alu_ri(Alu::Cmp, Rcx, n as i32);
                a.jcc(Cc::Ne, self.stubs.dispatch);
                if after != 0 {
                    a.lea(R14, slot(-after));
                }
            }
            None => {
                a.jmp(self.stubs.dispatch);
            }
        }
    }

    /// Jumps to the code pc held in the closure in rax.
    fn enter_closure(&self, a: &mut Asm) {
        a.mov_rm(Rcx, m(Rax, 0));
        a.shift_ri(Shift::Sar, Rcx, 1);
        a.mov_rm(Rdx, m(Rbp, off::WORDS));
        a.lea(Rdx, Mem::Index(Rdx, Rcx, 4, 0));
        Self::bytecode_jump(a, self.arena.base());
    }

    /// Branches to `slow` unless rax is a closure or infix pointer.
    fn closure_guard(a: &mut Asm, slow: &mut Vec<super::x64::Fixup>) {
        a.test_r8i(Rax, 1);
        slow.push(a.jcc_fwd(Cc::Ne));
        a.mov_rm(Rcx, m(Rax, -8));
        a.alu_r8i(Alu::Cmp, Rcx, CLOSURE_TAG);
        let ok = a.jcc_fwd(Cc::E);
        a.alu_r8i(Alu::Cmp, Rcx, INFIX_TAG);
        slow.push(a.jcc_fwd(Cc::Ne));
        a.bind(ok);
    }

    /// Fast path with a helper fallback: `fast` emits the inline code and
    /// collects its bail-out jumps.
    fn guarded(
        &mut self,
        cx: &mut Cx<'_>,
        op: Opcode,
        pc: usize,
        next: usize,
        pops: i32,
        fast: impl FnOnce(&mut Asm, &mut Vec<super::x64::Fixup>, i32),
    ) -> Result<(), JitError> {
        let o = cx.stack_offset;
        let mut a = self.asm();
        let mut slow = Vec::new();
        fast(&mut a, &mut slow, o);
        let done = a.jmp_fwd();
        for f in slow {
            a.bind(f);
        }
        self.exec(&mut a, op, pc, Some(next), o, o + pops);
        a.bind(done);
        self.put(a)?;
        cx.stack_offset += pops;
        Ok(())
    }

    fn generic(&mut self, cx: &mut Cx<'_>, op: Opcode, pc: usize, next: Option<usize>) -> Result<(), JitError> {
        cx.flush(self)?;
        let mut a = self.asm();
        self.exec(&mut a, op, pc, next, 0, 0);
        self.put(a)?;
        Ok(())
    }

    /// Emits `a` ending in a rel32 jump and links it to bytecode `target`.
    fn put_linked(&mut self, cx: &mut Cx<'_>, a: Asm, rel_at: usize, target: usize) -> Result<(), JitError> {
        let start = self.put(a)?;
        cx.link(self, start + rel_at as i64, target);
        Ok(())
    }

    fn float_inline(&mut self, cx: &mut Cx<'_>, name: &str, pc: usize) -> Result<bool, JitError> {
        let arith = match name {
            "caml_add_float" => Some(Sse::Add),
            "caml_sub_float" => Some(Sse::Sub),
            "caml_mul_float" => Some(Sse::Mul),
            "caml_div_float" => Some(Sse::Div),
            "caml_eq_float" | "caml_lt_float" | "caml_le_float" => None,
            _ => return Ok(false),
        };
        let header = Header::new(DOUBLE_TAG, 1, 0).0 as i64;
        let name = name.to_string();
        self.guarded(cx, Opcode::CCall, pc, pc + 3, 1, |a, slow, o| {
            a.test_r8i(Rax, 1);
            slow.push(a.jcc_fwd(Cc::Ne));
            a.alu_m8i(Alu::Cmp, m(Rax, -8), DOUBLE_TAG);
            slow.push(a.jcc_fwd(Cc::Ne));
            a.mov_rm(Rcx, slot(o));
            a.test_r8i(Rcx, 1);
            slow.push(a.jcc_fwd(Cc::Ne));
            a.alu_m8i(Alu::Cmp, m(Rcx, -8), DOUBLE_TAG);
            slow.push(a.jcc_fwd(Cc::Ne));
            match arith {
                Some(op) => {
                    a.movsd_xm(Xmm(0), m(Rax, 0));
                    a.sse_xm(op, Xmm(0), m(Rcx, 0));
                    a.lea(Rdx, m(R15, -16));
                    a.alu_rm(Alu::Cmp, Rdx, m(Rbp, off::MINOR_BASE));
                    slow.push(a.jcc_fwd(Cc::B));
                    a.mov_rr(R15, Rdx);
                    a.mov_ri(Rdx, header);
                    a.mov_mr(m(R15, 0), Rdx);
                    a.movsd_mx(m(R15, 8), Xmm(0));
                    a.lea(Rax, m(R15, 8));
                }
                None if name == "caml_eq_float" => {
                    a.movsd_xm(Xmm(0), m(Rax, 0));
                    a.ucomisd_xm(Xmm(0), m(Rcx, 0));
                    a.setcc(Cc::E, Rdx);
                    a.setcc(Cc::Np, Rcx);
                    a.movzx_r8(Rdx, Rdx);
                    a.movzx_r8(Rcx, Rcx);
                    a.alu_rr(Alu::And, Rcx, Rdx);
                    a.lea(Rax, Mem::Index(Rcx, Rcx, 1, 1));
                }
                None => {
                    // b > a or b >= a; unordered sets CF so both fail.
                    a.movsd_xm(Xmm(1), m(Rcx, 0));
                    a.ucomisd_xm(Xmm(1), m(Rax, 0));
                    a.setcc(if name == "caml_lt_float" { Cc::A } else { Cc::Ae }, Rcx);
                    a.movzx_r8(Rcx, Rcx);
                    a.lea(Rax, Mem::Index(Rcx, Rcx, 1, 1));
                }
            }
        })?;
        Ok(true)
    }

    /// Disassembly-free dump: one line per logged instruction with its
    /// native range and bytes.
    pub fn dump_range(&self, start: i64, end: i64) -> String {
        self.arena.bytes(start, end).iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
    }
}

fn int_cc(op: Opcode) -> Cc {
    match op {
        Opcode::Eq | Opcode::Beq => Cc::E,
        Opcode::Neq | Opcode::Bneq => Cc::Ne,
        Opcode::LtInt | Opcode::BltInt => Cc::L,
        Opcode::LeInt | Opcode::BleInt => Cc::Le,
        Opcode::GtInt | Opcode::BgtInt => Cc::G,
        _ => Cc::Ge,
    }
}

impl Emitter for NativeEmitter {
    fn code_end(&self) -> i64 {
        self.code_end
    }

    fn cursor(&self) -> i64 {
        self.cursor
    }

    fn template(&mut self, cx: &mut Cx<'_>, pc: usize, ins: &Instr) -> Result<(), JitError> {
        use Opcode::*;
        let o = cx.stack_offset;
        let arg = |k: usize| ins.args[k];
        let next = pc + ins.word_len();
        let mut a = self.asm();
        match ins.op {
            Acc => a.mov_rm(Rax, slot(o + arg(0) as i32)),
            Push => {
                a.mov_mr(slot(o - 1), Rax);
                cx.stack_offset -= 1;
            }
            PushAcc => {
                a.mov_mr(slot(o - 1), Rax);
                a.mov_rm(Rax, slot(o - 1 + arg(0) as i32));
                cx.stack_offset -= 1;
            }
            Pop => cx.stack_offset += arg(0) as i32,
            Assign => {
                a.mov_mr(slot(o + arg(0) as i32), Rax);
                a.mov_ri(Rax, 1);
            }
            EnvAcc => a.mov_rm(Rax, m(R12, 8 * arg(0) as i32)),
            OffsetClosure => a.lea(Rax, m(R12, 8 * arg(0) as i32)),
            ConstInt => a.mov_ri(Rax, arg(0).wrapping_mul(2) + 1),
            Atom => a.mov_ri(Rax, self.atom0 + 8 * arg(0)),
            OffsetInt => {
                let d = 2 * arg(0);
                if fits_i32(d) {
                    a.alu_ri(Alu::Add, Rax, d as i32);
                } else {
                    a.mov_ri(Rcx, d);
                    a.alu_rr(Alu::Add, Rax, Rcx);
                }
            }
            NegInt | BoolNot => {
                a.neg(Rax);
                a.alu_ri(Alu::Add, Rax, if ins.op == NegInt { 2 } else { 4 });
            }
            IsInt => {
                a.alu_ri(Alu::And, Rax, 1);
                a.lea(Rax, Mem::Index(Rax, Rax, 1, 1));
            }
            AddInt => {
                a.alu_rm(Alu::Add, Rax, slot(o));
                a.dec(Rax);
                cx.stack_offset += 1;
            }
            SubInt => {
                a.alu_rm(Alu::Sub, Rax, slot(o));
                a.inc(Rax);
                cx.stack_offset += 1;
            }
            MulInt => {
                a.mov_rm(Rcx, slot(o));
                a.shift_ri(Shift::Sar, Rcx, 1);
                a.dec(Rax);
                a.imul_rr(Rax, Rcx);
                a.inc(Rax);
                cx.stack_offset += 1;
            }
            AndInt | OrInt | XorInt => {
                let op = match ins.op {
                    AndInt => Alu::And,
                    OrInt => Alu::Or,
                    _ => Alu::Xor,
                };
                a.alu_rm(op, Rax, slot(o));
                if ins.op == XorInt {
                    a.alu_ri(Alu::Or, Rax, 1);
                }
                cx.stack_offset += 1;
            }
            LslInt | LsrInt | AsrInt => {
                a.mov_rm(Rcx, slot(o));
                a.shift_ri(Shift::Sar, Rcx, 1);
                match ins.op {
                    LslInt => {
                        a.dec(Rax);
                        a.shift_cl(Shift::Shl, Rax);
                        a.inc(Rax);
                    }
                    LsrInt => {
                        a.shift_cl(Shift::Shr, Rax);
                        a.alu_ri(Alu::Or, Rax, 1);
                    }
                    _ => {
                        a.shift_cl(Shift::Sar, Rax);
                        a.alu_ri(Alu::Or, Rax, 1);
                    }
                }
                cx.stack_offset += 1;
            }
            Eq | Neq | LtInt | LeInt | GtInt | GeInt => {
                a.alu_rm(Alu::Cmp, Rax, slot(o));
                a.setcc(int_cc(ins.op), Rcx);
                a.movzx_r8(Rcx, Rcx);
                a.lea(Rax, Mem::Index(Rcx, Rcx, 1, 1));
                cx.stack_offset += 1;
            }
            DivInt | ModInt => {
                let op = ins.op;
                return self.guarded(cx, op, pc, next, 1, |a, slow, o| {
                    a.mov_rm(Rcx, slot(o));
                    a.alu_ri(Alu::Cmp, Rcx, 1);
                    slow.push(a.jcc_fwd(Cc::E));
                    a.shift_ri(Shift::Sar, Rcx, 1);
                    a.shift_ri(Shift::Sar, Rax, 1);
                    a.cqo();
                    a.idiv(Rcx);
                    let r = if op == DivInt { Rax } else { Rdx };
                    a.lea(Rax, Mem::Index(r, r, 1, 1));
                });
            }
            GetGlobal => {
                a.mov_rm(Rcx, m(Rbp, off::GLOBALS));
                a.mov_rm(Rax, m(Rcx, 8 * arg(0) as i32));
            }
            SetGlobal => {
                a.mov_rm(Rcx, m(Rbp, off::GLOBALS));
                a.mov_mr(m(Rcx, 8 * arg(0) as i32), Rax);
                a.mov_ri(Rax, 1);
            }
            GetField => {
                let n = arg(0);
                return self.guarded(cx, GetField, pc, next, 0, |a, slow, _| {
                    a.test_r8i(Rax, 1);
                    slow.push(a.jcc_fwd(Cc::Ne));
                    a.mov_rm(Rcx, m(Rax, -8));
                    a.alu_r8i(Alu::Cmp, Rcx, NO_SCAN_TAG);
                    slow.push(a.jcc_fwd(Cc::Ae));
                    a.shift_ri(Shift::Shr, Rcx, 10);
                    a.alu_ri(Alu::Cmp, Rcx, n as i32);
                    slow.push(a.jcc_fwd(Cc::Be));
                    a.mov_rm(Rax, m(Rax, 8 * n as i32));
                });
            }
            VectLength => {
                return self.guarded(cx, VectLength, pc, next, 0, |a, slow, _| {
                    a.test_r8i(Rax, 1);
                    slow.push(a.jcc_fwd(Cc::Ne));
                    a.mov_rm(Rax, m(Rax, -8));
                    a.shift_ri(Shift::Shr, Rax, 10);
                    a.lea(Rax, Mem::Index(Rax, Rax, 1, 1));
                });
            }
            GetVectItem | SetVectItem => {
                let set = ins.op == SetVectItem;
                return self.guarded(cx, ins.op, pc, next, if set { 2 } else { 1 }, |a, slow, o| {
                    a.test_r8i(Rax, 1);
                    slow.push(a.jcc_fwd(Cc::Ne));
                    a.mov_rm(Rcx, m(Rax, -8));
                    a.alu_r8i(Alu::Cmp, Rcx, NO_SCAN_TAG);
                    slow.push(a.jcc_fwd(Cc::Ae));
                    a.shift_ri(Shift::Shr, Rcx, 10);
                    a.mov_rm(Rdx, slot(o));
                    a.shift_ri(Shift::Sar, Rdx, 1);
                    a.alu_rr(Alu::Cmp, Rdx, Rcx);
                    slow.push(a.jcc_fwd(Cc::Ae));
                    if set {
                        // Only immediates: they need no write barrier.
                        a.mov_rm(Rcx, slot(o + 1));
                        a.test_r8i(Rcx, 1);
                        slow.push(a.jcc_fwd(Cc::E));
                        a.mov_mr(Mem::Index(Rax, Rdx, 8, 0), Rcx);
                        a.mov_ri(Rax, 1);
                    } else {
                        a.mov_rm(Rax, Mem::Index(Rax, Rdx, 8, 0));
                    }
                });
            }
            MakeBlock if arg(1) == 0 => a.mov_ri(Rax, self.atom0 + 8 * arg(0)),
            MakeBlock if arg(1) as usize <= crate::heap::MAX_YOUNG_WOSIZE => {
                let size = arg(1) as i32;
                let header = Header::new(arg(0) as u8, size as usize, 0).0 as i64;
                return self.guarded(cx, MakeBlock, pc, next, size - 1, |a, slow, o| {
                    a.lea(Rcx, m(R15, -8 * (size + 1)));
                    a.alu_rm(Alu::Cmp, Rcx, m(Rbp, off::MINOR_BASE));
                    slow.push(a.jcc_fwd(Cc::B));
                    a.mov_rr(R15, Rcx);
                    a.mov_ri(Rcx, header);
                    a.mov_mr(m(R15, 0), Rcx);
                    a.mov_mr(m(R15, 8), Rax);
                    for i in 1..size {
                        a.mov_rm(Rcx, slot(o + i - 1));
                        a.mov_mr(m(R15, 8 * (i + 1)), Rcx);
                    }
                    a.lea(Rax, m(R15, 8));
                });
            }
            CheckSignals => {
                return self.guarded(cx, CheckSignals, pc, next, 0, |a, slow, _| {
                    a.mov_rm(Rcx, m(Rbp, off::SIGNAL));
                    a.alu_m8i(Alu::Cmp, m(Rcx, 0), 0);
                    slow.push(a.jcc_fwd(Cc::Ne));
                });
            }
            CCall if cx.options.float_inline && arg(1) == 2 => {
                let name = self.prims[arg(0) as usize];
                if !self.float_inline(cx, name, pc)? {
                    return self.generic(cx, CCall, pc, Some(next));
                }
                return Ok(());
            }
            Branch => {
                cx.flush(self)?;
                let site = self.jump()?;
                cx.link(self, site, ins.targets(pc)[0] as usize);
                return Ok(());
            }
            BranchIf | BranchIfNot | Beq | Bneq | BltInt | BleInt | BgtInt | BgeInt => {
                cx.flush(self)?;
                let mut a = self.asm();
                let cc = match ins.op {
                    BranchIf | BranchIfNot => {
                        a.alu_ri(Alu::Cmp, Rax, 1);
                        if ins.op == BranchIf {
                            Cc::Ne
                        } else {
                            Cc::E
                        }
                    }
                    _ => {
                        a.mov_ri(Rcx, arg(0).wrapping_mul(2) + 1);
                        a.alu_rr(Alu::Cmp, Rcx, Rax);
                        int_cc(ins.op)
                    }
                };
                let at = a.jcc(cc, a.here());
                return self.put_linked(cx, a, at, ins.targets(pc)[0] as usize);
            }
            Stop => {
                cx.flush(self)?;
                let mut a = self.asm();
                a.jmp(self.stubs.rt_stop);
                self.put(a)?;
                return Ok(());
            }
            Apply if arg(0) <= MAX_INLINE_ARGS => {
                cx.flush(self)?;
                let n = arg(0) as i32;
                let mut a = self.asm();
                let mut slow = Vec::new();
                Self::closure_guard(&mut a, &mut slow);
                a.alu_rm(Alu::Cmp, R14, m(Rbp, off::STACK_LIMIT));
                slow.push(a.jcc_fwd(Cc::B));
                for i in 0..n {
                    a.mov_rm(Rcx, slot(i));
                    a.mov_mr(slot(i - 3), Rcx);
                }
                a.lea(R14, slot(-3));
                a.mov_mi(slot(n), 2 * (pc as i32 + 2) + 1);
                a.mov_mr(slot(n + 1), R12);
                a.mov_mr(slot(n + 2), R13);
                a.mov_rr(R12, Rax);
                a.mov_ri(R13, 2 * (n as i64 - 1) + 1);
                self.enter_closure(&mut a);
                for f in slow {
                    a.bind(f);
                }
                self.exec(&mut a, Apply, pc, None, 0, 0);
                self.put(a)?;
                return Ok(());
            }
            AppTerm if arg(0) <= MAX_INLINE_ARGS => {
                cx.flush(self)?;
                let (n, size) = (arg(0) as i32, arg(1) as i32);
                let mut a = self.asm();
                let mut slow = Vec::new();
                Self::closure_guard(&mut a, &mut slow);
                a.alu_rm(Alu::Cmp, R14, m(Rbp, off::STACK_LIMIT));
                slow.push(a.jcc_fwd(Cc::B));
                for i in (0..n).rev() {
                    a.mov_rm(Rcx, slot(i));
                    a.mov_mr(slot(size - n + i), Rcx);
                }
                if size != n {
                    a.lea(R14, slot(size - n));
                }
                a.mov_rr(R12, Rax);
                if n > 1 {
                    a.alu_ri(Alu::Add, R13, 2 * (n - 1));
                }
                self.enter_closure(&mut a);
                for f in slow {
                    a.bind(f);
                }
                self.exec(&mut a, AppTerm, pc, None, 0, 0);
                self.put(a)?;
                return Ok(());
            }
            Return => {
                cx.flush(self)?;
                let n = arg(0) as i32;
                let mut a = self.asm();
                if n != 0 {
                    a.lea(R14, slot(n));
                }
                a.alu_ri(Alu::Cmp, R13, 1);
                let extra = a.jcc_fwd(Cc::Ne);
                a.mov_rm(Rcx, slot(0));
                a.mov_rm(R12, slot(1));
                a.mov_rm(R13, slot(2));
                a.lea(R14, slot(3));
                a.shift_ri(Shift::Sar, Rcx, 1);
                a.mov_rm(Rdx, m(Rbp, off::WORDS));
                a.lea(Rdx, Mem::Index(Rdx, Rcx, 4, 0));
                Self::bytecode_jump(&mut a, self.arena.base());
                a.bind(extra);
                let mut slow = Vec::new();
                Self::closure_guard(&mut a, &mut slow);
                a.alu_ri(Alu::Sub, R13, 2);
                a.mov_rr(R12, Rax);
                self.enter_closure(&mut a);
                for f in slow {
                    a.bind(f);
                }
                self.exec(&mut a, Return, pc, None, -n, 0);
                self.put(a)?;
                return Ok(());
            }
            Grab => {
                cx.flush(self)?;
                let n = arg(0) as i32;
                let mut a = self.asm();
                a.alu_ri(Alu::Cmp, R13, 2 * n + 1);
                let slow = a.jcc_fwd(Cc::L);
                if n != 0 {
                    a.alu_ri(Alu::Sub, R13, 2 * n);
                }
                let done = a.jmp_fwd();
                a.bind(slow);
                self.exec(&mut a, Grab, pc, Some(next), 0, 0);
                a.bind(done);
                self.put(a)?;
                return Ok(());
            }
            Switch => {
                for t in ins.targets(pc) {
                    cx.enqueue(t as usize);
                }
                return self.generic(cx, Switch, pc, None);
            }
            Raise | Apply | AppTerm => return self.generic(cx, ins.op, pc, None),
            op => return self.generic(cx, op, pc, Some(next)),
        }
        self.put(a)?;
        Ok(())
    }

    fn stack_adjust(&mut self, words: i32) -> Result<(), JitError> {
        let mut a = self.asm();
        a.lea(R14, slot(words));
        self.put(a).map(|_| ())
    }

    fn jump(&mut self) -> Result<i64, JitError> {
        let mut a = self.asm();
        let at = a.jmp(a.here());
        Ok(self.put(a)? + at as i64)
    }

    fn read_slot(&self, site: i64) -> i32 {
        self.arena.read_i32(site)
    }

    fn write_slot(&mut self, site: i64, v: i32) {
        self.arena.write(site, &v.to_le_bytes());
    }

    fn resolve_slot(&mut self, site: i64, target: i64) {
        let rel = target - (site + 4);
        self.arena.write(site, &(rel as i32).to_le_bytes());
    }
}
