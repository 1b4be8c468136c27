//! Backend-independent translation driver.
//!
//! Translated instructions are recorded in the code words themselves: the
//! opcode word of an instruction whose native code starts at `addr` is
//! overwritten with `addr - code_end`, a negative 32-bit value. Raw opcodes
//! stay non-negative, so a single sign test separates the two. While a
//! compilation is in progress, the opcode word of a branch target that has
//! not been translated yet heads a chain of unresolved jump sites: each
//! site's patch slot holds the previous word content and the chain ends in
//! the original opcode.

use crate::bytecode::{decode, Arity, Instr, Opcode, NUM_OPCODES};
use std::collections::VecDeque;
use thiserror::Error;

pub const DEFAULT_ARENA_SIZE: usize = 1 << 24;
/// Largest arena accepted, reserved tail included.
pub const MAX_ARENA_SIZE: usize = 1 << 27;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JitError {
    #[error("code arena exhausted")]
    ArenaExhausted,
    #[error("bad opcode word {word} at {at}")]
    BadOpcode { at: usize, word: i32 },
    #[error("arena size {0} out of range")]
    ArenaSize(usize),
    #[error("native code generation is only supported on x86-64 hosts")]
    UnsupportedHost,
    #[error("cannot map executable memory: {0}")]
    Mmap(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JitOptions {
    pub stack_elide: bool,
    pub float_inline: bool,
    /// Keep the arena non-writable while generated code runs.
    pub wx: bool,
    pub arena_size: usize,
}

impl Default for JitOptions {
    fn default() -> Self {
        JitOptions { stack_elide: true, float_inline: true, wx: false, arena_size: DEFAULT_ARENA_SIZE }
    }
}

/// Native code range emitted for one bytecode instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub pc: usize,
    pub op: Opcode,
    pub start: i64,
    pub end: i64,
    /// Whether the opcode word was mapped to `start`.
    pub mapped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct JitStats {
    pub compiles: u64,
    pub blocks: u64,
    pub instructions: u64,
    /// Instructions emitted again because a join was reached with a
    /// non-zero stack offset.
    pub duplicates: u64,
}

/// Target of a control transfer out of a template.
pub enum Target {
    /// Already translated; jump straight to this address.
    Native(i64),
    /// Untranslated: the site must be threaded.
    Pending,
}

/// Code generator driven by [`Translator`]. Addresses are `i64` so that the
/// trace backend can use arena positions and the native backend real
/// addresses.
pub trait Emitter {
    fn code_end(&self) -> i64;
    fn cursor(&self) -> i64;
    /// Emits the template for `ins`, the instruction at `pc`.
    fn template(&mut self, cx: &mut Cx<'_>, pc: usize, ins: &Instr) -> Result<(), JitError>;
    /// Emits an adjustment of the physical stack pointer by `words`.
    fn stack_adjust(&mut self, words: i32) -> Result<(), JitError>;
    /// Emits an unconditional jump with a patch slot and returns the site.
    fn jump(&mut self) -> Result<i64, JitError>;
    fn read_slot(&self, site: i64) -> i32;
    fn write_slot(&mut self, site: i64, v: i32);
    fn resolve_slot(&mut self, site: i64, target: i64);
}

/// Per-compilation state handed to templates.
pub struct Cx<'a> {
    pub words: &'a mut [i32],
    /// Words by which the modeled sp is above the physical one.
    pub stack_offset: i32,
    pub options: JitOptions,
    ts: &'a mut TranslationState,
}

impl Cx<'_> {
    /// Emits the pending stack adjustment, if any.
    pub fn flush<E: Emitter + ?Sized>(&mut self, e: &mut E) -> Result<(), JitError> {
        if self.stack_offset != 0 {
            e.stack_adjust(self.stack_offset)?;
            self.stack_offset = 0;
        }
        Ok(())
    }

    pub fn is_translated(&self, pc: usize) -> bool {
        self.words[pc] < 0 && !self.ts.threaded[pc]
    }

    /// Where a jump to bytecode `pc` should go.
    pub fn target<E: Emitter + ?Sized>(&self, e: &E, pc: usize) -> Target {
        if self.is_translated(pc) {
            Target::Native(e.code_end() + self.words[pc] as i64)
        } else {
            Target::Pending
        }
    }

    /// Points the jump at `site` to bytecode `pc`, threading it if needed.
    pub fn link<E: Emitter + ?Sized>(&mut self, e: &mut E, site: i64, pc: usize) {
        match self.target(e, pc) {
            Target::Native(addr) => e.resolve_slot(site, addr),
            Target::Pending => {
                e.write_slot(site, self.words[pc]);
                self.words[pc] = (site - e.code_end()) as i32;
                self.ts.threaded[pc] = true;
                self.enqueue(pc);
            }
        }
    }

    /// Schedules `pc` for translation without linking anything to it.
    pub fn enqueue(&mut self, pc: usize) {
        if !self.ts.queued[pc] {
            self.ts.queued[pc] = true;
            self.ts.pending.push_back(pc);
        }
    }
}

/// Worklist and threading bookkeeping that persists across compilations.
#[derive(Clone, Debug, Default)]
pub struct TranslationState {
    pending: VecDeque<usize>,
    queued: Vec<bool>,
    threaded: Vec<bool>,
    pub stats: JitStats,
    pub log: Vec<LogEntry>,
    pub keep_log: bool,
}

/// The opcode of the instruction at `pc`, looking through a jump chain.
fn opcode_at<E: Emitter + ?Sized>(e: &E, words: &[i32], threaded: &[bool], pc: usize) -> i32 {
    let mut w = words[pc];
    if threaded[pc] {
        while w < 0 {
            w = e.read_slot(e.code_end() + w as i64);
        }
    }
    w
}

/// Decodes the instruction at `at` as if its opcode word held `op`.
pub fn decode_as(words: &[i32], at: usize, op: Opcode) -> Instr {
    let len = match op.arity() {
        Arity::Fixed(k) => 1 + k.len(),
        Arity::ClosureRec => 3 + words[at + 1] as usize,
        Arity::Switch => {
            let packed = words[at + 1] as u32;
            2 + (packed & 0xFFFF) as usize + (packed >> 16) as usize
        }
    };
    let mut tmp = Vec::with_capacity(len);
    tmp.push(op as i32);
    tmp.extend_from_slice(&words[at + 1..at + len]);
    decode(&tmp, 0).expect("validated segment").0
}

pub struct Translator<E: Emitter> {
    pub emitter: E,
    pub ts: TranslationState,
    pub options: JitOptions,
}

impl<E: Emitter> Translator<E> {
    pub fn new(emitter: E, options: JitOptions, code_len: usize) -> Self {
        let ts = TranslationState {
            queued: vec![false; code_len],
            threaded: vec![false; code_len],
            ..TranslationState::default()
        };
        Translator { emitter, ts, options }
    }

    /// Native address of the instruction at `at`, if it was translated.
    pub fn lookup_native(&self, words: &[i32], at: usize) -> Option<i64> {
        (words[at] < 0).then(|| self.emitter.code_end() + words[at] as i64)
    }

    /// Translates the block at `at` and everything it makes pending.
    pub fn compile(&mut self, words: &mut [i32], at: usize) -> Result<i64, JitError> {
        if let Some(addr) = self.lookup_native(words, at) {
            return Ok(addr);
        }
        if !(0..NUM_OPCODES as i32).contains(&words[at]) {
            return Err(JitError::BadOpcode { at, word: words[at] });
        }
        self.ts.stats.compiles += 1;
        self.ts.queued[at] = true;
        self.ts.pending.push_back(at);
        while let Some(pc) = self.ts.pending.pop_front() {
            self.ts.queued[pc] = false;
            self.translate_block(words, pc)?;
        }
        debug_assert!(self.ts.threaded.iter().all(|t| !t));
        Ok(self.emitter.code_end() + words[at] as i64)
    }

    fn map(&mut self, words: &mut [i32], pc: usize, addr: i64) {
        let e = &mut self.emitter;
        if self.ts.threaded[pc] {
            let mut head = words[pc];
            while head < 0 {
                let site = e.code_end() + head as i64;
                head = e.read_slot(site);
                e.resolve_slot(site, addr);
            }
            self.ts.threaded[pc] = false;
        }
        words[pc] = (addr - e.code_end()) as i32;
    }

    fn translate_block(&mut self, words: &mut [i32], at: usize) -> Result<(), JitError> {
        if words[at] < 0 && !self.ts.threaded[at] {
            return Ok(());
        }
        self.ts.stats.blocks += 1;
        let mut stack_offset = 0;
        let mut pc = at;
        loop {
            if words[pc] < 0 && !self.ts.threaded[pc] {
                let mut cx = Cx { words: &mut *words, stack_offset, options: self.options, ts: &mut self.ts };
                cx.flush(&mut self.emitter)?;
                let site = self.emitter.jump()?;
                cx.link(&mut self.emitter, site, pc);
                return Ok(());
            }
            let raw = opcode_at(&self.emitter, words, &self.ts.threaded, pc);
            let op = Opcode::from_word(raw).ok_or(JitError::BadOpcode { at: pc, word: raw })?;
            let ins = decode_as(words, pc, op);
            let start = self.emitter.cursor();
            let mapped = stack_offset == 0;
            if mapped {
                self.map(words, pc, start);
            } else if self.ts.threaded[pc] {
                self.ts.stats.duplicates += 1;
            }
            let mut cx = Cx { words: &mut *words, stack_offset, options: self.options, ts: &mut self.ts };
            self.emitter.template(&mut cx, pc, &ins)?;
            if !self.options.stack_elide {
                cx.flush(&mut self.emitter)?;
            }
            stack_offset = cx.stack_offset;
            self.ts.stats.instructions += 1;
            if self.ts.keep_log {
                let end = self.emitter.cursor();
                self.ts.log.push(LogEntry { pc, op, start, end, mapped });
            }
            if op.ends_block() {
                debug_assert_eq!(stack_offset, 0, "{op} must flush");
                return Ok(());
            }
            pc += crate::bytecode::encode(&ins).expect("decoded").len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;

    /// Minimal emitter: one byte per op, slots stored in a side table.
    #[derive(Default)]
    struct Fake {
        cursor: i64,
        slots: std::collections::HashMap<i64, (i32, bool)>,
        adjusts: Vec<i32>,
    }

    const END: i64 = 1 << 20;

    impl Emitter for Fake {
        fn code_end(&self) -> i64 {
            END
        }
        fn cursor(&self) -> i64 {
            self.cursor
        }
        fn template(&mut self, cx: &mut Cx<'_>, pc: usize, ins: &Instr) -> Result<(), JitError> {
            use Opcode::*;
            self.cursor += 1;
            match ins.op {
                Push => cx.stack_offset -= 1,
                AddInt => cx.stack_offset += 1,
                Pop => cx.stack_offset += ins.args[0] as i32,
                Acc | ConstInt | Stop => {}
                _ => cx.flush(self)?,
            }
            if ins.op == Stop {
                cx.flush(self)?;
            }
            for t in ins.targets(pc) {
                let site = self.jump()?;
                cx.link(self, site, t as usize);
            }
            Ok(())
        }
        fn stack_adjust(&mut self, words: i32) -> Result<(), JitError> {
            self.adjusts.push(words);
            self.cursor += 1;
            Ok(())
        }
        fn jump(&mut self) -> Result<i64, JitError> {
            let site = self.cursor;
            self.cursor += 1;
            self.slots.insert(site, (0, false));
            Ok(site)
        }
        fn read_slot(&self, site: i64) -> i32 {
            assert!(!self.slots[&site].1, "chain walked into a resolved slot");
            self.slots[&site].0
        }
        fn write_slot(&mut self, site: i64, v: i32) {
            self.slots.insert(site, (v, false));
        }
        fn resolve_slot(&mut self, site: i64, target: i64) {
            self.slots.insert(site, ((target - END) as i32, true));
        }
    }

    fn compile(src: &str) -> (Translator<Fake>, Vec<i32>, i64) {
        let seg = assemble(src).unwrap();
        let mut words = seg.words.clone();
        let mut t = Translator::new(Fake::default(), JitOptions::default(), words.len());
        t.ts.keep_log = true;
        let addr = t.compile(&mut words, 0).unwrap();
        (t, words, addr)
    }

    fn starts(src: &str) -> Vec<usize> {
        assemble(src).unwrap().instructions().unwrap().into_iter().map(|(at, _)| at).collect()
    }

    #[test]
    fn stop_only() {
        let (t, words, addr) = compile("STOP");
        assert_eq!(addr, 0);
        assert_eq!(words, vec![-END as i32]);
        assert_eq!(t.ts.stats.blocks, 1);
    }

    #[test]
    fn diamond_maps_every_instruction() {
        let src = "CONSTINT 1\nBRANCHIFNOT else\nCONSTINT 2\nBRANCH join\nelse: CONSTINT 3\njoin: OFFSETINT 1\nSTOP";
        let (t, words, _) = compile(src);
        for at in starts(src) {
            assert!(words[at] < 0, "word {at} untranslated");
        }
        assert!(t.emitter.slots.values().all(|s| s.1), "unresolved slot");
        assert!(t.ts.threaded.iter().all(|x| !x));
    }

    #[test]
    fn second_compile_emits_nothing() {
        let src = "CONSTINT 1\nBRANCHIFNOT l\nCONSTINT 2\nl: STOP";
        let seg = assemble(src).unwrap();
        let mut words = seg.words.clone();
        let mut t = Translator::new(Fake::default(), JitOptions::default(), words.len());
        let a = t.compile(&mut words, 0).unwrap();
        let c = t.emitter.cursor;
        assert_eq!(t.compile(&mut words, 0).unwrap(), a);
        assert_eq!(t.emitter.cursor, c);
    }

    #[test]
    fn two_forward_jumps_chain_then_patch() {
        let src = "CONSTINT 0\nBRANCHIF l\nBRANCHIFNOT l\nl: STOP";
        let l = *starts(src).last().unwrap();
        let mut words = assemble(src).unwrap().words;
        let mut t = Translator::new(Fake::default(), JitOptions::default(), words.len());
        let mut e = std::mem::take(&mut t.emitter);
        let mut cx = Cx { words: &mut words, stack_offset: 0, options: t.options, ts: &mut t.ts };
        let f1 = e.jump().unwrap();
        cx.link(&mut e, f1, l);
        let f2 = e.jump().unwrap();
        cx.link(&mut e, f2, l);
        assert_eq!(e.slots[&f1].0, Opcode::Stop as i32);
        assert_eq!(e.slots[&f2].0, (f1 - END) as i32);
        assert_eq!(cx.words[l], (f2 - END) as i32);
        assert_eq!(opcode_at(&e, cx.words, &cx.ts.threaded, l), Opcode::Stop as i32);
        t.emitter = e;
        t.map(&mut words, l, 77);
        assert_eq!(words[l], (77 - END) as i32);
        assert_eq!(t.emitter.slots[&f1], ((77 - END) as i32, true));
        assert_eq!(t.emitter.slots[&f2], ((77 - END) as i32, true));
        assert!(!t.ts.threaded[l]);
    }

    #[test]
    fn backward_branch_reuses_translation() {
        let src = "loop: CONSTINT 1\nBRANCHIF loop\nSTOP";
        let (t, _, _) = compile(src);
        let pcs: Vec<usize> = t.ts.log.iter().map(|l| l.pc).collect();
        assert_eq!(pcs, vec![0, 2, 4]);
        assert!(t.emitter.slots.values().all(|s| s.1 && s.0 == -END as i32));
    }

    #[test]
    fn push_acc_add_needs_no_adjustment() {
        let (t, _, _) = compile("CONSTINT 1\nPUSH\nACC 0\nADDINT\nSTOP");
        assert!(t.emitter.adjusts.is_empty());
        let (t, _, _) = compile("CONSTINT 1\nPUSH\nPUSH\nACC 0\nADDINT\nSTOP");
        assert_eq!(t.emitter.adjusts, vec![-1]);
    }

    #[test]
    fn nonzero_offset_defers_mapping() {
        // The PUSH leaves the offset at -1 when `l` is reached by
        // fallthrough, so `l` is translated again from the worklist.
        let src = "CONSTINT 0\nBRANCHIF l\nPUSH\nl: CONSTINT 2\nSTOP";
        let (t, words, _) = compile(src);
        let l = starts(src)[3];
        assert!(words[l] < 0);
        assert_eq!(t.ts.stats.duplicates, 1);
        let mapped: Vec<usize> = t.ts.log.iter().filter(|e| e.mapped).map(|e| e.pc).collect();
        assert_eq!(mapped.iter().filter(|&&p| p == l).count(), 1);
    }
}
