//! Primitive table: the functions reachable through C_CALL.
//!
//! A primitive receives its arguments as a mutable slice (first argument is
//! the accumulator). Allocation goes through [`PrimCtx`], which treats that
//! slice as extra roots, so arguments must be re-read after any allocation.

use crate::heap::{Heap, HeapError, RootSet};
use crate::value::{Value, DOUBLE_TAG, STRING_TAG};
use std::collections::HashMap;
use thiserror::Error;

pub const MAX_PRIM_ARITY: usize = 5;

pub enum PrimError {
    Raise(Value),
    InvalidArgument(&'static str),
    DivByZero,
    OutOfMemory,
}

impl From<HeapError> for PrimError {
    fn from(_: HeapError) -> Self {
        PrimError::OutOfMemory
    }
}

pub type PrimResult = Result<Value, PrimError>;
pub type PrimFn = fn(&mut PrimCtx<'_>, &mut [Value]) -> PrimResult;

pub struct PrimCtx<'a> {
    pub heap: &'a mut Heap,
    pub out: &'a mut Vec<u8>,
    pub roots: &'a mut dyn RootSet,
}

impl PrimCtx<'_> {
    pub fn alloc(&mut self, tag: u8, size: usize, keep: &mut [Value]) -> PrimResult {
        Ok(self.heap.alloc(tag, size, &mut (&mut *self.roots, keep))?)
    }

    pub fn alloc_float(&mut self, d: f64, keep: &mut [Value]) -> PrimResult {
        Ok(self.heap.alloc_float(d, &mut (&mut *self.roots, keep))?)
    }

    pub fn alloc_string(&mut self, bytes: &[u8], keep: &mut [Value]) -> PrimResult {
        Ok(self.heap.alloc_string(bytes, &mut (&mut *self.roots, keep))?)
    }
}

#[derive(Clone, Copy)]
pub struct Prim {
    pub name: &'static str,
    pub arity: usize,
    pub f: PrimFn,
}

impl std::fmt::Debug for Prim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.name, self.arity)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown primitive `{0}`")]
pub struct UnknownPrimitive(pub String);

#[derive(Clone, Debug, Default)]
pub struct Registry {
    map: HashMap<&'static str, Prim>,
}

/// Primitives resolved against a segment, in its declaration order.
#[derive(Clone, Debug, Default)]
pub struct PrimTable {
    pub entries: Vec<Prim>,
}

impl PrimTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Registry {
    pub fn empty() -> Registry {
        Registry::default()
    }

    pub fn builtins() -> Registry {
        let mut r = Registry::empty();
        r.register("print_int", 1, print_int);
        r.register("print_string", 1, print_string);
        r.register("print_newline", 1, print_newline);
        r.register("string_length", 1, string_length);
        r.register("string_get", 2, string_get);
        r.register("string_set", 3, string_set);
        r.register("caml_add_float", 2, add_float);
        r.register("caml_sub_float", 2, sub_float);
        r.register("caml_mul_float", 2, mul_float);
        r.register("caml_div_float", 2, div_float);
        r.register("caml_neg_float", 1, neg_float);
        r.register("caml_eq_float", 2, eq_float);
        r.register("caml_lt_float", 2, lt_float);
        r.register("caml_le_float", 2, le_float);
        r.register("caml_sqrt_float", 1, sqrt_float);
        r.register("caml_int_of_float", 1, int_of_float);
        r.register("caml_float_of_int", 1, float_of_int);
        r.register("caml_float_of_string", 1, float_of_string);
        r.register("array_make", 2, array_make);
        r
    }

    /// Adds or replaces a primitive. Arity must be in `1..=5`.
    pub fn register(&mut self, name: &'static str, arity: usize, f: PrimFn) -> &mut Registry {
        assert!((1..=MAX_PRIM_ARITY).contains(&arity), "primitive arity {arity} out of range");
        self.map.insert(name, Prim { name, arity, f });
        self
    }

    pub fn get(&self, name: &str) -> Option<&Prim> {
        self.map.get(name)
    }

    pub fn resolve(&self, names: &[String]) -> Result<PrimTable, UnknownPrimitive> {
        let entries = names
            .iter()
            .map(|n| self.map.get(n.as_str()).copied().ok_or_else(|| UnknownPrimitive(n.clone())))
            .collect::<Result<_, _>>()?;
        Ok(PrimTable { entries })
    }
}

fn unit() -> PrimResult {
    Ok(Value::UNIT)
}

fn is_float(v: Value) -> bool {
    v.is_block() && unsafe { v.header() }.tag() == DOUBLE_TAG
}

fn is_string(v: Value) -> bool {
    v.is_block() && unsafe { v.header() }.tag() == STRING_TAG
}

fn float_arg(v: Value) -> Result<f64, PrimError> {
    if is_float(v) {
        Ok(unsafe { v.double() })
    } else {
        Err(PrimError::InvalidArgument("float expected"))
    }
}

fn int_arg(v: Value) -> Result<i64, PrimError> {
    if v.is_int() {
        Ok(v.as_int())
    } else {
        Err(PrimError::InvalidArgument("int expected"))
    }
}

fn string_arg<'a>(v: Value) -> Result<&'a mut [u8], PrimError> {
    if is_string(v) {
        Ok(unsafe { v.string_bytes_mut() })
    } else {
        Err(PrimError::InvalidArgument("string expected"))
    }
}

fn print_int(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let n = int_arg(a[0])?;
    c.out.extend_from_slice(n.to_string().as_bytes());
    unit()
}

fn print_string(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let s = string_arg(a[0])?;
    c.out.extend_from_slice(s);
    unit()
}

fn print_newline(c: &mut PrimCtx, _: &mut [Value]) -> PrimResult {
    c.out.push(b'\n');
    unit()
}

fn string_length(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    Ok(Value::of_int(string_arg(a[0])?.len() as i64))
}

fn string_index(s: &[u8], i: Value) -> Result<usize, PrimError> {
    let i = int_arg(i)?;
    if i < 0 || i as usize >= s.len() {
        return Err(PrimError::InvalidArgument("index out of bounds"));
    }
    Ok(i as usize)
}

fn string_get(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let s = string_arg(a[0])?;
    let i = string_index(s, a[1])?;
    Ok(Value::of_int(s[i] as i64))
}

fn string_set(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let s = string_arg(a[0])?;
    let i = string_index(s, a[1])?;
    s[i] = int_arg(a[2])? as u8;
    unit()
}

/// The float operations shared with the inline templates.
pub mod float_ops {
    pub fn add(a: f64, b: f64) -> f64 {
        a + b
    }
    pub fn sub(a: f64, b: f64) -> f64 {
        a - b
    }
    pub fn mul(a: f64, b: f64) -> f64 {
        a * b
    }
    pub fn div(a: f64, b: f64) -> f64 {
        a / b
    }
}

fn float_binop(c: &mut PrimCtx, a: &mut [Value], op: fn(f64, f64) -> f64) -> PrimResult {
    let r = op(float_arg(a[0])?, float_arg(a[1])?);
    c.alloc_float(r, &mut [])
}

fn add_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    float_binop(c, a, float_ops::add)
}

fn sub_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    float_binop(c, a, float_ops::sub)
}

fn mul_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    float_binop(c, a, float_ops::mul)
}

fn div_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    float_binop(c, a, float_ops::div)
}

fn neg_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let d = float_arg(a[0])?;
    c.alloc_float(-d, &mut [])
}

fn eq_float(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    Ok(Value::of_bool(float_arg(a[0])? == float_arg(a[1])?))
}

fn lt_float(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    Ok(Value::of_bool(float_arg(a[0])? < float_arg(a[1])?))
}

fn le_float(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    Ok(Value::of_bool(float_arg(a[0])? <= float_arg(a[1])?))
}

fn sqrt_float(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let d = float_arg(a[0])?;
    c.alloc_float(d.sqrt(), &mut [])
}

fn int_of_float(_: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    Ok(Value::of_int_wrapping(float_arg(a[0])? as i64))
}

fn float_of_int(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let n = int_arg(a[0])?;
    c.alloc_float(n as f64, &mut [])
}

fn float_of_string(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let s = string_arg(a[0])?;
    let d = std::str::from_utf8(s)
        .ok()
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or(PrimError::InvalidArgument("float_of_string"))?;
    c.alloc_float(d, &mut [])
}

fn array_make(c: &mut PrimCtx, a: &mut [Value]) -> PrimResult {
    let n = int_arg(a[0])?;
    if n < 0 {
        return Err(PrimError::InvalidArgument("Array.make"));
    }
    let arr = c.alloc(0, n as usize, a)?;
    let init = a[1];
    for i in 0..n as usize {
        unsafe { c.heap.modify(arr.as_ptr().add(i), init) };
    }
    Ok(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::HeapConfig;

    fn call(name: &str, args: &mut [Value], heap: &mut Heap, out: &mut Vec<u8>) -> PrimResult {
        let r = Registry::builtins();
        let p = r.get(name).unwrap();
        assert_eq!(p.arity, args.len());
        let mut ctx = PrimCtx { heap, out, roots: &mut () };
        (p.f)(&mut ctx, args)
    }

    #[test]
    fn resolve_in_order() {
        let r = Registry::builtins();
        let t = r.resolve(&["print_int".into()]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(
            r.resolve(&["print_int".into(), "nope".into()]).unwrap_err(),
            UnknownPrimitive("nope".into())
        );
    }

    #[test]
    fn duplicate_names_share_entry() {
        let r = Registry::builtins();
        let t = r.resolve(&["caml_add_float".into(), "caml_add_float".into()]).unwrap();
        assert_eq!(t.entries[0].f as usize, t.entries[1].f as usize);
    }

    #[test]
    fn add_float_boxes_result() {
        let mut h = Heap::new(HeapConfig::default());
        let mut out = vec![];
        let a = h.alloc_float(1.5, &mut ()).unwrap();
        let b = h.alloc_float(2.25, &mut [a]).unwrap();
        let r = call("caml_add_float", &mut [a, b], &mut h, &mut out).ok().unwrap();
        assert_eq!(unsafe { r.header() }.tag(), DOUBLE_TAG);
        assert_eq!(unsafe { r.double() }, 3.75);
    }

    #[test]
    fn print_int_writes_decimal() {
        let mut h = Heap::new(HeapConfig::default());
        let mut out = vec![];
        let r = call("print_int", &mut [Value::of_int(42)], &mut h, &mut out).ok().unwrap();
        assert_eq!(out, b"42");
        assert_eq!(r, Value::UNIT);
    }

    #[test]
    fn string_get_bounds() {
        let mut h = Heap::new(HeapConfig::default());
        let mut out = vec![];
        let s = h.alloc_string(b"abc", &mut ()).unwrap();
        let r = call("string_get", &mut [s, Value::of_int(2)], &mut h, &mut out).ok().unwrap();
        assert_eq!(r, Value::of_int(b'c' as i64));
        assert!(matches!(
            call("string_get", &mut [s, Value::of_int(3)], &mut h, &mut out),
            Err(PrimError::InvalidArgument(_))
        ));
    }

    #[test]
    fn float_of_string_parses() {
        let mut h = Heap::new(HeapConfig::default());
        let mut out = vec![];
        let s = h.alloc_string(b"-2.5e1", &mut ()).unwrap();
        let r = call("caml_float_of_string", &mut [s], &mut h, &mut out).ok().unwrap();
        assert_eq!(unsafe { r.double() }, -25.0);
        let bad = h.alloc_string(b"x", &mut ()).unwrap();
        assert!(matches!(
            call("caml_float_of_string", &mut [bad], &mut h, &mut out),
            Err(PrimError::InvalidArgument(_))
        ));
    }

    #[test]
    #[should_panic]
    fn arity_is_bounded() {
        Registry::empty().register("six", 6, |_, _| Ok(Value::UNIT));
    }
}
