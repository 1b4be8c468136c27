//! Tagged machine-word values and block headers.
//!
//! A [`Value`] is one 64-bit word. If the least significant bit is set the
//! word is an integer `n` stored as `2n + 1`; otherwise it is the address of
//! the first field of a block (the header lives in the word just before it).

use std::fmt;

/// Largest magnitude accepted by [`Value::of_int`].
pub const INT_LIMIT: i64 = 1 << 62;

pub const CLOSURE_TAG: u8 = 247;
pub const INFIX_TAG: u8 = 249;
/// Blocks with a tag at or above this hold raw data and are never scanned.
pub const NO_SCAN_TAG: u8 = 251;
pub const STRING_TAG: u8 = 252;
pub const DOUBLE_TAG: u8 = 253;
pub const DOUBLE_ARRAY_TAG: u8 = 254;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct Value(pub u64);

impl Value {
    pub const UNIT: Value = Value(1);
    pub const FALSE: Value = Value(1);
    pub const TRUE: Value = Value(3);

    /// Tags `n`; `|n|` must be below 2^62.
    #[inline]
    pub fn of_int(n: i64) -> Value {
        assert!(n > -INT_LIMIT && n < INT_LIMIT, "integer {n} out of tagged range");
        Value::of_int_wrapping(n)
    }

    /// Tags `n`, dropping the top bit as arithmetic on tagged words does.
    #[inline]
    pub fn of_int_wrapping(n: i64) -> Value {
        Value((n as u64).wrapping_shl(1) | 1)
    }

    #[inline]
    pub fn of_bool(b: bool) -> Value {
        if b {
            Value::TRUE
        } else {
            Value::FALSE
        }
    }

    #[inline]
    pub fn is_int(self) -> bool {
        self.0 & 1 == 1
    }

    #[inline]
    pub fn is_block(self) -> bool {
        self.0 & 1 == 0
    }

    #[inline]
    pub fn as_int(self) -> i64 {
        debug_assert!(self.is_int(), "not an integer: {self:?}");
        (self.0 as i64) >> 1
    }

    #[inline]
    pub fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn as_ptr(self) -> *mut Value {
        self.0 as *mut Value
    }

    /// Header of the block this value points at.
    ///
    /// # Safety
    /// `self` must reference a live block.
    #[inline]
    pub unsafe fn header(self) -> Header {
        Header(*(self.0 as *const u64).sub(1))
    }

    /// # Safety
    /// `self` must reference a live block with more than `i` fields.
    #[inline]
    pub unsafe fn field(self, i: usize) -> Value {
        *self.as_ptr().add(i)
    }

    /// Raw store without write barrier.
    ///
    /// # Safety
    /// `self` must reference a live block with more than `i` fields.
    #[inline]
    pub unsafe fn init_field(self, i: usize, v: Value) {
        *self.as_ptr().add(i) = v;
    }

    /// # Safety
    /// `self` must reference a live float block.
    #[inline]
    pub unsafe fn double(self) -> f64 {
        f64::from_bits(*(self.0 as *const u64))
    }

    /// # Safety
    /// `self` must reference a live float array with more than `i` elements.
    #[inline]
    pub unsafe fn double_field(self, i: usize) -> f64 {
        f64::from_bits(*(self.0 as *const u64).add(i))
    }

    /// # Safety
    /// `self` must reference a live float array with more than `i` elements.
    #[inline]
    pub unsafe fn set_double_field(self, i: usize, d: f64) {
        *(self.0 as *mut u64).add(i) = d.to_bits();
    }

    /// Bytes of a string block.
    ///
    /// # Safety
    /// `self` must reference a live string block; the slice must not outlive it.
    pub unsafe fn string_bytes<'a>(self) -> &'a [u8] {
        let len = string_length(self);
        std::slice::from_raw_parts(self.0 as *const u8, len)
    }

    /// # Safety
    /// Same as [`Value::string_bytes`].
    pub unsafe fn string_bytes_mut<'a>(self) -> &'a mut [u8] {
        let len = string_length(self);
        std::slice::from_raw_parts_mut(self.0 as *mut u8, len)
    }
}

/// Byte length of a string block, recovered from the padding byte.
///
/// # Safety
/// `v` must reference a live string block.
pub unsafe fn string_length(v: Value) -> usize {
    let bytes = v.header().size() * 8;
    let pad = *(v.0 as *const u8).add(bytes - 1) as usize;
    bytes - 1 - pad
}

/// Number of words a string of `len` bytes occupies, padding byte included.
pub fn string_words(len: usize) -> usize {
    (len + 8) / 8
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_int() {
            write!(f, "Int({})", self.as_int())
        } else {
            write!(f, "Ptr({:#x})", self.0)
        }
    }
}

/// Block header word: `size << 10 | color << 8 | tag`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(transparent)]
pub struct Header(pub u64);

impl Header {
    #[inline]
    pub fn new(tag: u8, size: usize, color: u8) -> Header {
        Header(((size as u64) << 10) | (((color & 3) as u64) << 8) | tag as u64)
    }

    #[inline]
    pub fn tag(self) -> u8 {
        self.0 as u8
    }

    #[inline]
    pub fn size(self) -> usize {
        (self.0 >> 10) as usize
    }

    #[inline]
    pub fn color(self) -> u8 {
        ((self.0 >> 8) & 3) as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tagging_examples() {
        assert_eq!(Value::of_int(0).raw(), 1);
        assert_eq!(Value::of_int(3).raw(), 7);
        assert_eq!(Value::of_int(-1).raw() as i64, -1);
        assert_eq!(Value(7).as_int(), 3);
        assert_eq!(Value(1).as_int(), 0);
    }

    #[test]
    #[should_panic]
    fn out_of_range_is_a_bug() {
        Value::of_int(INT_LIMIT);
    }

    #[test]
    fn header_fields() {
        let h = Header::new(CLOSURE_TAG, 5, 2);
        assert_eq!((h.tag(), h.size(), h.color()), (CLOSURE_TAG, 5, 2));
    }

    #[test]
    fn string_word_counts() {
        assert_eq!(string_words(0), 1);
        assert_eq!(string_words(7), 1);
        assert_eq!(string_words(8), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(n in -(INT_LIMIT - 1)..INT_LIMIT) {
            let v = Value::of_int(n);
            prop_assert!(v.is_int());
            prop_assert_eq!(v.as_int(), n);
        }

        #[test]
        fn and_of_tagged_is_tagged_and(a in -(INT_LIMIT - 1)..INT_LIMIT, b in -(INT_LIMIT - 1)..INT_LIMIT) {
            let r = Value(Value::of_int(a).raw() & Value::of_int(b).raw());
            prop_assert_eq!(r, Value::of_int(a & b));
        }
    }
}
