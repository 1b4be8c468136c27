//! Two-generation heap: a bump-allocated minor arena that is evacuated into a
//! grow-only major space by a copying minor collection.
//!
//! The minor arena allocates downward. `young_ptr` points at the header of the
//! most recently allocated block and the arena is full when the next header
//! would fall below `minor_base`. Major blocks are never freed.

use crate::value::{string_words, Header, Value, DOUBLE_TAG, INFIX_TAG, NO_SCAN_TAG, STRING_TAG};
use thiserror::Error;

/// Blocks above this many fields skip the minor arena.
pub const MAX_YOUNG_WOSIZE: usize = 256;
pub const DEFAULT_MINOR_BYTES: usize = 256 * 1024;
pub const DEFAULT_MAJOR_CAP_BYTES: usize = 2 << 30;
const MAJOR_CHUNK_WORDS: usize = 1 << 17;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("out of memory: major heap cap of {cap_bytes} bytes exhausted")]
    OutOfMemory { cap_bytes: usize },
    #[error("field index {index} out of bounds for block of size {size}")]
    FieldOutOfBounds { index: usize, size: usize },
    #[error("store into a non-block value")]
    NotABlock,
}

#[derive(Debug, Clone, Copy)]
pub struct HeapConfig {
    pub minor_bytes: usize,
    pub major_cap_bytes: usize,
}

impl Default for HeapConfig {
    fn default() -> Self {
        HeapConfig {
            minor_bytes: DEFAULT_MINOR_BYTES,
            major_cap_bytes: DEFAULT_MAJOR_CAP_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeapStats {
    pub minor_collections: u64,
    pub promoted_words: u64,
    pub major_words: u64,
}

/// Anything that can enumerate GC roots. The collector may rewrite every slot
/// it is handed.
pub trait RootSet {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value));
}

impl RootSet for [Value] {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value)) {
        for v in self.iter_mut() {
            f(v);
        }
    }
}

impl<const N: usize> RootSet for [Value; N] {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value)) {
        for v in self.iter_mut() {
            f(v);
        }
    }
}

impl RootSet for Vec<Value> {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value)) {
        for v in self.iter_mut() {
            f(v);
        }
    }
}

impl RootSet for () {
    fn for_each_root(&mut self, _f: &mut dyn FnMut(&mut Value)) {}
}

impl<A: RootSet + ?Sized, B: RootSet + ?Sized> RootSet for (&mut A, &mut B) {
    fn for_each_root(&mut self, f: &mut dyn FnMut(&mut Value)) {
        self.0.for_each_root(f);
        self.1.for_each_root(f);
    }
}

pub struct Heap {
    minor: Box<[u64]>,
    minor_base: usize,
    minor_end: usize,
    young_ptr: usize,
    chunks: Vec<Box<[u64]>>,
    chunk_used: usize,
    major_words: usize,
    cap_words: usize,
    remembered: Vec<*mut Value>,
    atoms: Box<[u64]>,
    stats: HeapStats,
}

// The heap owns all memory its raw pointers reference.
unsafe impl Send for Heap {}

impl Heap {
    pub fn new(config: HeapConfig) -> Heap {
        let words = (config.minor_bytes / 8).max(2 * (MAX_YOUNG_WOSIZE + 1));
        let minor = vec![0u64; words].into_boxed_slice();
        let minor_base = minor.as_ptr() as usize;
        let minor_end = minor_base + words * 8;
        let atoms: Box<[u64]> = (0..=256u64)
            .map(|t| if t < 256 { Header::new(t as u8, 0, 0).0 } else { 0 })
            .collect();
        Heap {
            minor,
            minor_base,
            minor_end,
            young_ptr: minor_end,
            chunks: Vec::new(),
            chunk_used: 0,
            major_words: 0,
            cap_words: config.major_cap_bytes / 8,
            remembered: Vec::new(),
            atoms,
            stats: HeapStats::default(),
        }
    }

    /// The preallocated zero-sized block for `tag`.
    pub fn atom(&self, tag: u8) -> Value {
        Value(self.atoms.as_ptr() as u64 + 8 * (tag as u64 + 1))
    }

    pub fn minor_base(&self) -> usize {
        self.minor_base
    }

    pub fn minor_end(&self) -> usize {
        self.minor_end
    }

    pub fn young_ptr(&self) -> usize {
        self.young_ptr
    }

    /// Re-synchronizes the bump cursor after generated code allocated inline.
    pub fn set_young_ptr(&mut self, p: usize) {
        debug_assert!(p >= self.minor_base && p <= self.minor_end && p.is_multiple_of(8));
        self.young_ptr = p;
    }

    pub fn minor_bytes(&self) -> usize {
        self.minor.len() * 8
    }

    pub fn stats(&self) -> HeapStats {
        HeapStats {
            major_words: self.major_words as u64,
            ..self.stats
        }
    }

    pub fn remembered_len(&self) -> usize {
        self.remembered.len()
    }

    #[inline]
    pub fn is_young(&self, v: Value) -> bool {
        v.is_block() && (v.0 as usize) > self.minor_base && (v.0 as usize) < self.minor_end
    }

    /// True if `v` addresses a major-space block (atoms excluded).
    pub fn is_major(&self, v: Value) -> bool {
        v.is_block()
            && self.chunks.iter().any(|c| {
                let lo = c.as_ptr() as u64;
                v.0 > lo && v.0 < lo + 8 * c.len() as u64
            })
    }

    /// Allocates a block; scanned blocks start with every field set to
    /// `Value::of_int(0)`, raw blocks start zeroed. May run a minor collection.
    pub fn alloc(&mut self, tag: u8, size: usize, roots: &mut dyn RootSet) -> Result<Value, HeapError> {
        if size == 0 {
            return Ok(self.atom(tag));
        }
        let v = if size > MAX_YOUNG_WOSIZE {
            self.alloc_major(tag, size)?
        } else {
            let bytes = (size + 1) * 8;
            if self.young_ptr < self.minor_base + bytes {
                self.minor_collect(roots)?;
            }
            self.young_ptr -= bytes;
            unsafe { *(self.young_ptr as *mut u64) = Header::new(tag, size, 0).0 };
            Value((self.young_ptr + 8) as u64)
        };
        let fill = if tag < NO_SCAN_TAG { Value::of_int(0) } else { Value(0) };
        for i in 0..size {
            unsafe { v.init_field(i, fill) };
        }
        Ok(v)
    }

    /// Allocates a string block holding `bytes`.
    pub fn alloc_string(&mut self, bytes: &[u8], roots: &mut dyn RootSet) -> Result<Value, HeapError> {
        let words = string_words(bytes.len());
        let v = self.alloc(STRING_TAG, words, roots)?;
        unsafe { fill_string(v, words, bytes) };
        Ok(v)
    }

    pub fn alloc_major_string(&mut self, bytes: &[u8]) -> Result<Value, HeapError> {
        let words = string_words(bytes.len());
        let v = self.alloc_major(STRING_TAG, words)?;
        unsafe { fill_string(v, words, bytes) };
        Ok(v)
    }

    /// Boxes a double in a fresh one-field block.
    pub fn alloc_float(&mut self, d: f64, roots: &mut dyn RootSet) -> Result<Value, HeapError> {
        let v = self.alloc(DOUBLE_TAG, 1, roots)?;
        unsafe { v.set_double_field(0, d) };
        Ok(v)
    }

    /// Allocates directly in major space, bypassing the minor arena.
    pub fn alloc_major(&mut self, tag: u8, size: usize) -> Result<Value, HeapError> {
        let p = self.major_words_raw(size + 1)?;
        unsafe {
            *p = Header::new(tag, size, 0).0;
            let v = Value(p.add(1) as u64);
            let fill = if tag < NO_SCAN_TAG { Value::of_int(0) } else { Value(0) };
            for i in 0..size {
                v.init_field(i, fill);
            }
            Ok(v)
        }
    }

    fn major_words_raw(&mut self, words: usize) -> Result<*mut u64, HeapError> {
        if self.major_words + words > self.cap_words {
            return Err(HeapError::OutOfMemory {
                cap_bytes: self.cap_words * 8,
            });
        }
        let fits = self
            .chunks
            .last()
            .is_some_and(|c| c.len() - self.chunk_used >= words);
        if !fits {
            let len = words.max(MAJOR_CHUNK_WORDS);
            self.chunks.push(vec![0u64; len].into_boxed_slice());
            self.chunk_used = 0;
        }
        let chunk = self.chunks.last_mut().expect("chunk present");
        let p = unsafe { chunk.as_mut_ptr().add(self.chunk_used) };
        self.chunk_used += words;
        self.major_words += words;
        Ok(p)
    }

    /// Checked field store with write barrier.
    pub fn set_field(&mut self, block: Value, index: usize, v: Value) -> Result<(), HeapError> {
        if !block.is_block() {
            return Err(HeapError::NotABlock);
        }
        let size = unsafe { block.header() }.size();
        if index >= size {
            return Err(HeapError::FieldOutOfBounds { index, size });
        }
        unsafe { self.modify(block.as_ptr().add(index), v) };
        Ok(())
    }

    /// Unchecked store with write barrier.
    ///
    /// # Safety
    /// `slot` must be a field slot of a live block.
    #[inline]
    pub unsafe fn modify(&mut self, slot: *mut Value, v: Value) {
        *slot = v;
        self.remember(slot, v);
    }

    /// Records `slot` if it lives outside the minor arena and now holds a
    /// minor reference.
    #[inline]
    pub fn remember(&mut self, slot: *mut Value, v: Value) {
        let s = slot as usize;
        if self.is_young(v) && !(s >= self.minor_base && s < self.minor_end) {
            self.remembered.push(slot);
        }
    }

    /// Evacuates every live minor block into major space.
    pub fn minor_collect(&mut self, roots: &mut dyn RootSet) -> Result<(), HeapError> {
        let mut scan: Vec<Value> = Vec::new();
        let mut err = None;
        {
            let mut fwd = |slot: &mut Value| {
                if err.is_none() {
                    if let Err(e) = self.forward(slot, &mut scan) {
                        err = Some(e);
                    }
                }
            };
            roots.for_each_root(&mut fwd);
        }
        if let Some(e) = err {
            return Err(e);
        }
        let remembered = std::mem::take(&mut self.remembered);
        for slot in remembered {
            unsafe { self.forward(&mut *slot, &mut scan)? };
        }
        while let Some(block) = scan.pop() {
            let h = unsafe { block.header() };
            if h.tag() >= NO_SCAN_TAG {
                continue;
            }
            for i in 0..h.size() {
                unsafe { self.forward(&mut *block.as_ptr().add(i), &mut scan)? };
            }
        }
        self.young_ptr = self.minor_end;
        self.stats.minor_collections += 1;
        Ok(())
    }

    fn forward(&mut self, slot: &mut Value, scan: &mut Vec<Value>) -> Result<(), HeapError> {
        let v = *slot;
        if !self.is_young(v) {
            return Ok(());
        }
        unsafe {
            let mut block = v;
            let mut offset = 0u64;
            let h = block.header();
            if h.0 != 0 && h.tag() == INFIX_TAG {
                offset = h.size() as u64 * 8;
                block = Value(v.0 - offset);
            }
            let h = block.header();
            let moved = if h.0 == 0 {
                block.field(0)
            } else {
                let size = h.size();
                let p = self.major_words_raw(size + 1)?;
                std::ptr::copy_nonoverlapping((block.0 as *const u64).sub(1), p, size + 1);
                let copy = Value(p.add(1) as u64);
                *(block.0 as *mut u64).sub(1) = 0;
                block.init_field(0, copy);
                self.stats.promoted_words += size as u64 + 1;
                scan.push(copy);
                copy
            };
            *slot = Value(moved.0 + offset);
        }
        Ok(())
    }
}

unsafe fn fill_string(v: Value, words: usize, bytes: &[u8]) {
    let p = v.0 as *mut u8;
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), p, bytes.len());
    *p.add(words * 8 - 1) = (words * 8 - 1 - bytes.len()) as u8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::CLOSURE_TAG;

    fn small_heap(bytes: usize) -> Heap {
        Heap::new(HeapConfig {
            minor_bytes: bytes,
            ..HeapConfig::default()
        })
    }

    #[test]
    fn size_zero_returns_atom_without_allocating() {
        let mut h = Heap::new(HeapConfig::default());
        let before = h.young_ptr();
        let a = h.alloc(0, 0, &mut ()).unwrap();
        assert_eq!(a, h.atom(0));
        assert_eq!(h.young_ptr(), before);
        assert_eq!(unsafe { a.header() }.size(), 0);
    }

    #[test]
    fn fresh_block_is_zero_initialized() {
        let mut h = Heap::new(HeapConfig::default());
        let b = h.alloc(0, 2, &mut ()).unwrap();
        unsafe {
            assert_eq!(b.header().size(), 2);
            assert_eq!(b.field(0), Value::of_int(0));
            assert_eq!(b.field(1), Value::of_int(0));
        }
        assert!(h.is_young(b));
    }

    #[test]
    fn collection_count_matches_arena_fills() {
        // 4096-byte arena, 1-field blocks are 16 bytes: 256 per fill.
        let mut h = small_heap(8192);
        let per_fill = h.minor_bytes() / 16;
        let total = per_fill * 5 + 3;
        for _ in 0..total {
            h.alloc(0, 1, &mut ()).unwrap();
        }
        let expected = (total * 16).div_ceil(h.minor_bytes()) - 1;
        assert_eq!(h.stats().minor_collections as usize, expected);
    }

    #[test]
    fn large_blocks_go_straight_to_major() {
        let mut h = Heap::new(HeapConfig::default());
        let b = h.alloc(0, MAX_YOUNG_WOSIZE + 1, &mut ()).unwrap();
        assert!(!h.is_young(b));
        assert!(h.is_major(b));
    }

    #[test]
    fn empty_collect_resets_cursor() {
        let mut h = Heap::new(HeapConfig::default());
        h.minor_collect(&mut ()).unwrap();
        assert_eq!(h.young_ptr(), h.minor_end());
        assert_eq!(h.stats().major_words, 0);
    }

    #[test]
    fn int_store_does_not_grow_remembered_set() {
        let mut h = Heap::new(HeapConfig::default());
        let b = h.alloc(0, 1, &mut ()).unwrap();
        h.set_field(b, 0, Value::of_int(5)).unwrap();
        assert_eq!(h.remembered_len(), 0);
    }

    #[test]
    fn major_to_minor_store_is_remembered_and_followed() {
        let mut h = Heap::new(HeapConfig::default());
        let old = h.alloc_major(0, 1).unwrap();
        let young = h.alloc(0, 1, &mut ()).unwrap();
        h.set_field(young, 0, Value::of_int(42)).unwrap();
        h.set_field(old, 0, young).unwrap();
        assert_eq!(h.remembered_len(), 1);
        let mut roots = [old];
        h.minor_collect(&mut roots).unwrap();
        let moved = unsafe { old.field(0) };
        assert!(!h.is_young(moved));
        assert_eq!(unsafe { moved.field(0) }, Value::of_int(42));
        assert_eq!(h.remembered_len(), 0);
    }

    #[test]
    fn out_of_bounds_store_is_reported() {
        let mut h = Heap::new(HeapConfig::default());
        let b = h.alloc(0, 2, &mut ()).unwrap();
        assert_eq!(
            h.set_field(b, 2, Value::UNIT),
            Err(HeapError::FieldOutOfBounds { index: 2, size: 2 })
        );
    }

    #[test]
    fn list_survives_collection() {
        let mut h = Heap::new(HeapConfig::default());
        let mut list = [Value::of_int(0)];
        for i in (1..=3).rev() {
            let cell = h.alloc(0, 2, &mut list).unwrap();
            unsafe {
                cell.init_field(0, Value::of_int(i));
                cell.init_field(1, list[0]);
            }
            list[0] = cell;
        }
        h.minor_collect(&mut list).unwrap();
        let mut cur = list[0];
        let mut seen = vec![];
        while cur.is_block() {
            assert!(!h.is_young(cur));
            seen.push(unsafe { cur.field(0) }.as_int());
            cur = unsafe { cur.field(1) };
        }
        assert_eq!(seen, vec![1, 2, 3]);
    }

    #[test]
    fn unreachable_cycle_is_not_copied() {
        let mut h = Heap::new(HeapConfig::default());
        let a = h.alloc(0, 1, &mut ()).unwrap();
        let mut keep = [a];
        let b = h.alloc(0, 1, &mut keep).unwrap();
        unsafe {
            a.init_field(0, b);
            b.init_field(0, a);
        }
        let before = h.stats().major_words;
        h.minor_collect(&mut ()).unwrap();
        assert_eq!(h.stats().major_words, before);
    }

    #[test]
    fn infix_reference_is_rebased() {
        let mut h = Heap::new(HeapConfig::default());
        // [code0, infix(2), code1, var]
        let clo = h.alloc(CLOSURE_TAG, 4, &mut ()).unwrap();
        unsafe {
            clo.init_field(0, Value::of_int(10));
            clo.init_field(1, Value(Header::new(INFIX_TAG, 2, 0).0));
            clo.init_field(2, Value::of_int(20));
            clo.init_field(3, Value::of_int(30));
        }
        let mut roots = [Value(clo.0 + 16), clo];
        h.minor_collect(&mut roots).unwrap();
        let [inner, outer] = roots;
        assert!(!h.is_young(outer));
        assert_eq!(inner.0, outer.0 + 16);
        unsafe {
            assert_eq!(inner.field(0), Value::of_int(20));
            assert_eq!(inner.header().tag(), INFIX_TAG);
        }
    }

    #[test]
    fn strings_keep_their_length() {
        let mut h = Heap::new(HeapConfig::default());
        for n in [0usize, 1, 7, 8, 9, 100] {
            let bytes: Vec<u8> = (0..n as u8).collect();
            let s = h.alloc_string(&bytes, &mut ()).unwrap();
            assert_eq!(unsafe { s.string_bytes() }, &bytes[..]);
            let m = h.alloc_major_string(&bytes).unwrap();
            assert_eq!(unsafe { m.string_bytes() }, &bytes[..]);
        }
    }

    #[test]
    fn raw_blocks_are_not_scanned() {
        let mut h = Heap::new(HeapConfig::default());
        let s = h.alloc(STRING_TAG, 1, &mut ()).unwrap();
        unsafe { *(s.0 as *mut u64) = 0x0000_0000_0000_0000 };
        let mut roots = [s];
        h.minor_collect(&mut roots).unwrap();
        assert_eq!(unsafe { roots[0].header() }.tag(), STRING_TAG);
    }
}
