//! Minimal x86-64 encoder covering the instructions the templates use.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Reg {
    Rax,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Reg {
    fn low(self) -> u8 {
        self as u8 & 7
    }

    fn ext(self) -> bool {
        self as u8 >= 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Xmm(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mem {
    /// `[base + disp]`
    Base(Reg, i32),
    /// `[base + index * scale + disp]`
    Index(Reg, Reg, u8, i32),
    /// RIP-relative reference to an absolute address.
    Rip(i64),
}

pub fn m(base: Reg, disp: i32) -> Mem {
    Mem::Base(base, disp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Cc {
    O,
    No,
    B,
    Ae,
    E,
    Ne,
    Be,
    A,
    S,
    Ns,
    P,
    Np,
    L,
    Ge,
    Le,
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Alu {
    Add = 0,
    Or = 1,
    And = 4,
    Sub = 5,
    Xor = 6,
    Cmp = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Shift {
    Shl = 4,
    Shr = 5,
    Sar = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Sse {
    Add = 0x58,
    Mul = 0x59,
    Sub = 0x5C,
    Div = 0x5E,
}

/// Unbound forward jump: position of its rel32 field.
#[must_use]
pub struct Fixup(usize);

/// Code buffer that will be placed at address `base`.
pub struct Asm {
    pub buf: Vec<u8>,
    base: i64,
}

fn fits_i8(v: i64) -> bool {
    (-128..=127).contains(&v)
}

pub fn fits_i32(v: i64) -> bool {
    i32::try_from(v).is_ok()
}

impl Asm {
    pub fn new(base: i64) -> Asm {
        Asm { buf: Vec::with_capacity(64), base }
    }

    pub fn here(&self) -> i64 {
        self.base + self.buf.len() as i64
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn byte(&mut self, b: u8) {
        self.buf.push(b);
    }

    fn imm32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn rex(&mut self, w: bool, r: bool, x: bool, b: bool, force: bool) {
        if w || r || x || b || force {
            self.byte(0x40 | (w as u8) << 3 | (r as u8) << 2 | (x as u8) << 1 | b as u8);
        }
    }

    /// Register-direct form. `reg` is a register number or a /digit.
    fn enc_rr(&mut self, pre: &[u8], w: bool, op: &[u8], reg: u8, rm: Reg, force: bool) {
        self.buf.extend_from_slice(pre);
        self.rex(w, reg >= 8, false, rm.ext(), force);
        self.buf.extend_from_slice(op);
        self.byte(0xC0 | (reg & 7) << 3 | rm.low());
    }

    /// Memory form; `imm_len` immediate bytes follow the displacement.
    fn enc_mem(&mut self, pre: &[u8], w: bool, op: &[u8], reg: u8, mem: Mem, imm_len: usize) {
        self.buf.extend_from_slice(pre);
        let (base, index) = match mem {
            Mem::Base(b, _) => (Some(b), None),
            Mem::Index(b, i, _, _) => (Some(b), Some(i)),
            Mem::Rip(_) => (None, None),
        };
        self.rex(w, reg >= 8, index.is_some_and(Reg::ext), base.is_some_and(Reg::ext), false);
        self.buf.extend_from_slice(op);
        let r = (reg & 7) << 3;
        match mem {
            Mem::Rip(target) => {
                self.byte(r | 0b101);
                let end = self.here() + 4 + imm_len as i64;
                self.imm32((target - end) as i32);
            }
            Mem::Base(b, d) | Mem::Index(b, _, _, d) => {
                let md = if d == 0 && b.low() != 5 {
                    0
                } else if fits_i8(d as i64) {
                    1
                } else {
                    2
                };
                match mem {
                    Mem::Index(_, i, s, _) => {
                        debug_assert!(i != Reg::Rsp);
                        let ss = match s {
                            1 => 0,
                            2 => 1,
                            4 => 2,
                            8 => 3,
                            _ => panic!("bad scale {s}"),
                        };
                        self.byte(md << 6 | r | 0b100);
                        self.byte(ss << 6 | i.low() << 3 | b.low());
                    }
                    _ if b.low() == 4 => {
                        self.byte(md << 6 | r | 0b100);
                        self.byte(0x24);
                    }
                    _ => self.byte(md << 6 | r | b.low()),
                }
                match md {
                    1 => self.byte(d as i8 as u8),
                    2 => self.imm32(d),
                    _ => {}
                }
            }
        }
    }

    // ---- moves ----

    pub fn mov_rr(&mut self, dst: Reg, src: Reg) {
        self.enc_rr(&[], true, &[0x89], src as u8, dst, false);
    }

    pub fn mov_rm(&mut self, dst: Reg, mem: Mem) {
        self.enc_mem(&[], true, &[0x8B], dst as u8, mem, 0);
    }

    pub fn mov_mr(&mut self, mem: Mem, src: Reg) {
        self.enc_mem(&[], true, &[0x89], src as u8, mem, 0);
    }

    /// `mov qword [mem], simm32`
    pub fn mov_mi(&mut self, mem: Mem, imm: i32) {
        self.enc_mem(&[], true, &[0xC7], 0, mem, 4);
        self.imm32(imm);
    }

    /// Shortest load of a 64-bit constant.
    pub fn mov_ri(&mut self, dst: Reg, imm: i64) {
        if (0..=u32::MAX as i64).contains(&imm) {
            self.rex(false, false, false, dst.ext(), false);
            self.byte(0xB8 + dst.low());
            self.imm32(imm as u32 as i32);
        } else if fits_i32(imm) {
            self.enc_rr(&[], true, &[0xC7], 0, dst, false);
            self.imm32(imm as i32);
        } else {
            self.rex(true, false, false, dst.ext(), false);
            self.byte(0xB8 + dst.low());
            self.buf.extend_from_slice(&imm.to_le_bytes());
        }
    }

    /// Sign-extending 32-bit load.
    pub fn movsxd(&mut self, dst: Reg, mem: Mem) {
        self.enc_mem(&[], true, &[0x63], dst as u8, mem, 0);
    }

    pub fn lea(&mut self, dst: Reg, mem: Mem) {
        self.enc_mem(&[], true, &[0x8D], dst as u8, mem, 0);
    }

    pub fn movzx_r8(&mut self, dst: Reg, src: Reg) {
        self.enc_rr(&[], false, &[0x0F, 0xB6], dst as u8, src, src.low() >= 4 && !src.ext());
    }

    pub fn xchg(&mut self, a: Reg, b: Reg) {
        self.enc_rr(&[], true, &[0x87], b as u8, a, false);
    }

    // ---- arithmetic ----

    pub fn alu_rr(&mut self, op: Alu, dst: Reg, src: Reg) {
        self.enc_rr(&[], true, &[(op as u8) << 3 | 1], src as u8, dst, false);
    }

    pub fn alu_rm(&mut self, op: Alu, dst: Reg, mem: Mem) {
        self.enc_mem(&[], true, &[(op as u8) << 3 | 3], dst as u8, mem, 0);
    }

    pub fn alu_ri(&mut self, op: Alu, dst: Reg, imm: i32) {
        if fits_i8(imm as i64) {
            self.enc_rr(&[], true, &[0x83], op as u8, dst, false);
            self.byte(imm as i8 as u8);
        } else {
            self.enc_rr(&[], true, &[0x81], op as u8, dst, false);
            self.imm32(imm);
        }
    }

    /// 8-bit operation on the low byte of `dst`.
    pub fn alu_r8i(&mut self, op: Alu, dst: Reg, imm: u8) {
        self.enc_rr(&[], false, &[0x80], op as u8, dst, dst.low() >= 4 && !dst.ext());
        self.byte(imm);
    }

    /// 8-bit operation on a byte in memory.
    pub fn alu_m8i(&mut self, op: Alu, mem: Mem, imm: u8) {
        self.enc_mem(&[], false, &[0x80], op as u8, mem, 1);
        self.byte(imm);
    }

    /// `test dst8, imm8`
    pub fn test_r8i(&mut self, dst: Reg, imm: u8) {
        self.enc_rr(&[], false, &[0xF6], 0, dst, dst.low() >= 4 && !dst.ext());
        self.byte(imm);
    }

    pub fn test_rr(&mut self, a: Reg, b: Reg) {
        self.enc_rr(&[], true, &[0x85], b as u8, a, false);
    }

    pub fn inc(&mut self, r: Reg) {
        self.enc_rr(&[], true, &[0xFF], 0, r, false);
    }

    pub fn dec(&mut self, r: Reg) {
        self.enc_rr(&[], true, &[0xFF], 1, r, false);
    }

    pub fn neg(&mut self, r: Reg) {
        self.enc_rr(&[], true, &[0xF7], 3, r, false);
    }

    pub fn imul_rr(&mut self, dst: Reg, src: Reg) {
        self.enc_rr(&[], true, &[0x0F, 0xAF], dst as u8, src, false);
    }

    pub fn cqo(&mut self) {
        self.buf.extend_from_slice(&[0x48, 0x99]);
    }

    pub fn idiv(&mut self, r: Reg) {
        self.enc_rr(&[], true, &[0xF7], 7, r, false);
    }

    pub fn shift_cl(&mut self, op: Shift, r: Reg) {
        self.enc_rr(&[], true, &[0xD3], op as u8, r, false);
    }

    pub fn shift_ri(&mut self, op: Shift, r: Reg, n: u8) {
        self.enc_rr(&[], true, &[0xC1], op as u8, r, false);
        self.byte(n);
    }

    pub fn setcc(&mut self, cc: Cc, r: Reg) {
        self.enc_rr(&[], false, &[0x0F, 0x90 | cc as u8], 0, r, r.low() >= 4 && !r.ext());
    }

    // ---- SSE2 ----

    pub fn movsd_xm(&mut self, x: Xmm, mem: Mem) {
        self.enc_mem(&[0xF2], false, &[0x0F, 0x10], x.0, mem, 0);
    }

    pub fn movsd_mx(&mut self, mem: Mem, x: Xmm) {
        self.enc_mem(&[0xF2], false, &[0x0F, 0x11], x.0, mem, 0);
    }

    pub fn sse_xm(&mut self, op: Sse, x: Xmm, mem: Mem) {
        self.enc_mem(&[0xF2], false, &[0x0F, op as u8], x.0, mem, 0);
    }

    pub fn ucomisd_xm(&mut self, x: Xmm, mem: Mem) {
        self.enc_mem(&[0x66], false, &[0x0F, 0x2E], x.0, mem, 0);
    }

    // ---- control ----

    pub fn push(&mut self, r: Reg) {
        self.rex(false, false, false, r.ext(), false);
        self.byte(0x50 + r.low());
    }

    pub fn pop(&mut self, r: Reg) {
        self.rex(false, false, false, r.ext(), false);
        self.byte(0x58 + r.low());
    }

    pub fn ret(&mut self) {
        self.byte(0xC3);
    }

    pub fn nop(&mut self) {
        self.byte(0x90);
    }

    pub fn jmp_r(&mut self, r: Reg) {
        self.enc_rr(&[], false, &[0xFF], 4, r, false);
    }

    pub fn call_m(&mut self, mem: Mem) {
        self.enc_mem(&[], false, &[0xFF], 2, mem, 0);
    }

    /// `jmp rel32` to an absolute address; returns the offset of the rel32
    /// field in the buffer.
    pub fn jmp(&mut self, target: i64) -> usize {
        self.byte(0xE9);
        self.rel32(target)
    }

    pub fn jcc(&mut self, cc: Cc, target: i64) -> usize {
        self.buf.extend_from_slice(&[0x0F, 0x80 | cc as u8]);
        self.rel32(target)
    }

    pub fn call(&mut self, target: i64) -> usize {
        self.byte(0xE8);
        self.rel32(target)
    }

    fn rel32(&mut self, target: i64) -> usize {
        let at = self.buf.len();
        let rel = target - (self.here() + 4);
        debug_assert!(fits_i32(rel));
        self.imm32(rel as i32);
        at
    }

    pub fn jmp_fwd(&mut self) -> Fixup {
        let at = self.jmp(self.here() + 5);
        Fixup(at)
    }

    pub fn jcc_fwd(&mut self, cc: Cc) -> Fixup {
        let at = self.jcc(cc, self.here() + 6);
        Fixup(at)
    }

    /// Points a forward jump at the current position.
    pub fn bind(&mut self, f: Fixup) {
        let rel = self.buf.len() as i64 - (f.0 as i64 + 4);
        self.buf[f.0..f.0 + 4].copy_from_slice(&(rel as i32).to_le_bytes());
    }

    /// Jump from the current position to `target` within the same buffer.
    pub fn jcc_back(&mut self, cc: Cc, target: i64) {
        self.jcc(cc, target);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Reg::*;

    fn enc(f: impl FnOnce(&mut Asm)) -> Vec<u8> {
        let mut a = Asm::new(0x1000);
        f(&mut a);
        a.buf
    }

    // Expected bytes come from GNU as. Where as prefers a shorter form
    // (xchg with rax, add rax imm32, test al, sar by 1) the bytes were
    // decoded with objdump instead.
    #[test]
    fn moves() {
        assert_eq!(enc(|a| a.mov_rr(Rax, R12)), [0x4c, 0x89, 0xe0]);
        assert_eq!(enc(|a| a.mov_rm(Rax, m(R14, 0))), [0x49, 0x8b, 0x06]);
        assert_eq!(enc(|a| a.mov_rm(Rax, m(R14, 8))), [0x49, 0x8b, 0x46, 0x08]);
        assert_eq!(enc(|a| a.mov_rm(Rax, m(R12, 16))), [0x49, 0x8b, 0x44, 0x24, 0x10]);
        assert_eq!(enc(|a| a.mov_rm(Rcx, m(R13, 0))), [0x49, 0x8b, 0x4d, 0x00]);
        assert_eq!(enc(|a| a.mov_rm(Rcx, m(Rbp, 0x200))), [0x48, 0x8b, 0x8d, 0x00, 0x02, 0x00, 0x00]);
        assert_eq!(enc(|a| a.mov_mr(m(R14, -8), Rax)), [0x49, 0x89, 0x46, 0xf8]);
        assert_eq!(enc(|a| a.mov_mr(m(Rsp, 0), R15)), [0x4c, 0x89, 0x3c, 0x24]);
        assert_eq!(enc(|a| a.mov_mi(m(R14, 16), 5)), [0x49, 0xc7, 0x46, 0x10, 0x05, 0x00, 0x00, 0x00]);
        assert_eq!(enc(|a| a.mov_ri(Rax, 9)), [0xb8, 0x09, 0x00, 0x00, 0x00]);
        assert_eq!(enc(|a| a.mov_ri(R13, 1)), [0x41, 0xbd, 0x01, 0x00, 0x00, 0x00]);
        assert_eq!(enc(|a| a.mov_ri(Rax, -3)), [0x48, 0xc7, 0xc0, 0xfd, 0xff, 0xff, 0xff]);
        assert_eq!(
            enc(|a| a.mov_ri(Rcx, 0x1234_5678_9abc)),
            [0x48, 0xb9, 0xbc, 0x9a, 0x78, 0x56, 0x34, 0x12, 0x00, 0x00]
        );
        assert_eq!(enc(|a| a.movsxd(Rcx, m(Rdx, 0))), [0x48, 0x63, 0x0a]);
        assert_eq!(enc(|a| a.lea(R14, m(R14, -8))), [0x4d, 0x8d, 0x76, 0xf8]);
        assert_eq!(enc(|a| a.lea(Rax, Mem::Index(Rcx, Rcx, 1, 1))), [0x48, 0x8d, 0x44, 0x09, 0x01]);
        assert_eq!(enc(|a| a.lea(Rdx, Mem::Index(Rdx, Rcx, 4, 0))), [0x48, 0x8d, 0x14, 0x8a]);
        assert_eq!(enc(|a| a.mov_rm(Rax, Mem::Index(Rax, Rcx, 8, 0))), [0x48, 0x8b, 0x04, 0xc8]);
        assert_eq!(enc(|a| a.mov_rm(Rax, Mem::Index(R13, R9, 8, 0))), [0x4b, 0x8b, 0x44, 0xcd, 0x00]);
        assert_eq!(enc(|a| a.movzx_r8(Rcx, Rcx)), [0x0f, 0xb6, 0xc9]);
        assert_eq!(enc(|a| a.xchg(Rax, Rbx)), [0x48, 0x87, 0xd8]);
    }

    #[test]
    fn rip_relative() {
        // At 0x1000, 7 bytes long, referencing 0x800.
        assert_eq!(enc(|a| a.mov_rm(Rcx, Mem::Rip(0x800))), [0x48, 0x8b, 0x0d, 0xf9, 0xf7, 0xff, 0xff]);
        assert_eq!(enc(|a| a.alu_rm(Alu::Add, Rcx, Mem::Rip(0x1007))), [0x48, 0x03, 0x0d, 0x00, 0x00, 0x00, 0x00]);
        assert_eq!(enc(|a| a.call_m(Mem::Rip(0x1006))), [0xff, 0x15, 0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn arithmetic() {
        assert_eq!(enc(|a| a.alu_rm(Alu::And, Rax, m(R14, 0))), [0x49, 0x23, 0x06]);
        assert_eq!(enc(|a| a.alu_rm(Alu::Add, Rax, m(R14, 8))), [0x49, 0x03, 0x46, 0x08]);
        assert_eq!(enc(|a| a.alu_rm(Alu::Cmp, R14, m(Rbp, 48))), [0x4c, 0x3b, 0x75, 0x30]);
        assert_eq!(enc(|a| a.alu_rr(Alu::Sub, Rcx, Rax)), [0x48, 0x29, 0xc1]);
        assert_eq!(enc(|a| a.alu_rr(Alu::Cmp, Rcx, Rax)), [0x48, 0x39, 0xc1]);
        assert_eq!(enc(|a| a.alu_ri(Alu::Add, Rax, 6)), [0x48, 0x83, 0xc0, 0x06]);
        assert_eq!(enc(|a| a.alu_ri(Alu::Sub, Rsp, 8)), [0x48, 0x83, 0xec, 0x08]);
        assert_eq!(enc(|a| a.alu_ri(Alu::Cmp, R13, 5)), [0x49, 0x83, 0xfd, 0x05]);
        assert_eq!(enc(|a| a.alu_ri(Alu::Or, Rax, 1)), [0x48, 0x83, 0xc8, 0x01]);
        assert_eq!(enc(|a| a.alu_ri(Alu::Add, Rax, 1000)), [0x48, 0x81, 0xc0, 0xe8, 0x03, 0x00, 0x00]);
        assert_eq!(enc(|a| a.alu_r8i(Alu::Cmp, Rcx, 251)), [0x80, 0xf9, 0xfb]);
        assert_eq!(enc(|a| a.alu_m8i(Alu::Cmp, m(Rax, -8), 253)), [0x80, 0x78, 0xf8, 0xfd]);
        assert_eq!(enc(|a| a.test_r8i(Rax, 1)), [0xf6, 0xc0, 0x01]);
        assert_eq!(enc(|a| a.test_rr(Rcx, Rcx)), [0x48, 0x85, 0xc9]);
        assert_eq!(enc(|a| a.inc(Rax)), [0x48, 0xff, 0xc0]);
        assert_eq!(enc(|a| a.dec(Rax)), [0x48, 0xff, 0xc8]);
        assert_eq!(enc(|a| a.neg(Rax)), [0x48, 0xf7, 0xd8]);
        assert_eq!(enc(|a| a.imul_rr(Rax, Rcx)), [0x48, 0x0f, 0xaf, 0xc1]);
        assert_eq!(enc(|a| a.cqo()), [0x48, 0x99]);
        assert_eq!(enc(|a| a.idiv(Rcx)), [0x48, 0xf7, 0xf9]);
        assert_eq!(enc(|a| a.shift_cl(Shift::Shl, Rax)), [0x48, 0xd3, 0xe0]);
        assert_eq!(enc(|a| a.shift_cl(Shift::Sar, Rax)), [0x48, 0xd3, 0xf8]);
        assert_eq!(enc(|a| a.shift_cl(Shift::Shr, Rax)), [0x48, 0xd3, 0xe8]);
        assert_eq!(enc(|a| a.shift_ri(Shift::Sar, Rcx, 1)), [0x48, 0xc1, 0xf9, 0x01]);
        assert_eq!(enc(|a| a.shift_ri(Shift::Shr, Rcx, 10)), [0x48, 0xc1, 0xe9, 0x0a]);
        assert_eq!(enc(|a| a.setcc(Cc::L, Rcx)), [0x0f, 0x9c, 0xc1]);
        assert_eq!(enc(|a| a.setcc(Cc::Np, Rdx)), [0x0f, 0x9b, 0xc2]);
    }

    #[test]
    fn sse() {
        assert_eq!(enc(|a| a.movsd_xm(Xmm(0), m(Rax, 0))), [0xf2, 0x0f, 0x10, 0x00]);
        assert_eq!(enc(|a| a.movsd_mx(m(R15, 8), Xmm(0))), [0xf2, 0x41, 0x0f, 0x11, 0x47, 0x08]);
        assert_eq!(enc(|a| a.sse_xm(Sse::Add, Xmm(0), m(Rcx, 0))), [0xf2, 0x0f, 0x58, 0x01]);
        assert_eq!(enc(|a| a.sse_xm(Sse::Div, Xmm(1), m(Rcx, 0))), [0xf2, 0x0f, 0x5e, 0x09]);
        assert_eq!(enc(|a| a.ucomisd_xm(Xmm(1), m(Rax, 0))), [0x66, 0x0f, 0x2e, 0x08]);
    }

    #[test]
    fn control() {
        assert_eq!(enc(|a| a.push(Rbx)), [0x53]);
        assert_eq!(enc(|a| a.push(R15)), [0x41, 0x57]);
        assert_eq!(enc(|a| a.pop(R12)), [0x41, 0x5c]);
        assert_eq!(enc(|a| a.jmp_r(Rcx)), [0xff, 0xe1]);
        assert_eq!(enc(|a| a.jmp_r(Rbx)), [0xff, 0xe3]);
        assert_eq!(enc(|a| a.call_m(m(Rbp, 8))), [0xff, 0x55, 0x08]);
        assert_eq!(enc(|a| {
            a.jmp(0x1000);
        }), [0xe9, 0xfb, 0xff, 0xff, 0xff]);
        assert_eq!(enc(|a| {
            a.jcc(Cc::Ne, 0x1010);
        }), [0x0f, 0x85, 0x0a, 0x00, 0x00, 0x00]);
        assert_eq!(enc(|a| {
            a.call(0x2000);
        }), [0xe8, 0xfb, 0x0f, 0x00, 0x00]);
    }

    #[test]
    fn forward_fixup() {
        let b = enc(|a| {
            let f = a.jcc_fwd(Cc::E);
            a.nop();
            a.nop();
            a.bind(f);
        });
        assert_eq!(b, [0x0f, 0x84, 0x02, 0x00, 0x00, 0x00, 0x90, 0x90]);
    }
}
