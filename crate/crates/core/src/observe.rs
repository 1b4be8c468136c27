//! Engine-independent view of a finished run.

use crate::interp::{Counters, Exit, Fault, Vm};
use crate::value::{Value, CLOSURE_TAG, DOUBLE_ARRAY_TAG, DOUBLE_TAG, INFIX_TAG, STRING_TAG};
use std::fmt::{self, Write};

const MAX_DEPTH: usize = 6;
const MAX_FIELDS: usize = 16;

/// Renders a value structurally: `int 4`, `float 3.75`, `string "ab"`,
/// `block 0 [int 1; int 2]`, `closure`.
pub fn render(v: Value) -> String {
    let mut s = String::new();
    render_into(v, 0, &mut s).expect("write to String");
    s
}

fn render_into(v: Value, depth: usize, s: &mut String) -> fmt::Result {
    if v.is_int() {
        return write!(s, "int {}", v.as_int());
    }
    // SAFETY: a block reachable from the machine registers is live.
    let h = unsafe { v.header() };
    match h.tag() {
        CLOSURE_TAG | INFIX_TAG => s.write_str("closure"),
        DOUBLE_TAG => write!(s, "float {:?}", unsafe { v.double_field(0) }),
        STRING_TAG => {
            let b = unsafe { v.string_bytes() };
            write!(s, "string {}", crate::bytecode::asm::escape_bytes(b))
        }
        DOUBLE_ARRAY_TAG => {
            s.write_str("floatarray [")?;
            for i in 0..h.size() {
                if i > 0 {
                    s.write_str("; ")?;
                }
                if i == MAX_FIELDS {
                    s.write_str("...")?;
                    break;
                }
                write!(s, "{:?}", unsafe { v.double_field(i) })?;
            }
            s.write_str("]")
        }
        t if t > CLOSURE_TAG => write!(s, "opaque {t}"),
        t => {
            write!(s, "block {t} [")?;
            if depth >= MAX_DEPTH && h.size() > 0 {
                s.write_str("...")?;
            } else {
                for i in 0..h.size() {
                    if i > 0 {
                        s.write_str("; ")?;
                    }
                    if i == MAX_FIELDS {
                        s.write_str("...")?;
                        break;
                    }
                    render_into(unsafe { v.field(i) }, depth + 1, s)?;
                }
            }
            s.write_str("]")
        }
    }
}

/// How the program ended.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Value(String),
    Exception(String),
    Fault(Fault),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Value(v) => f.write_str(v),
            Outcome::Exception(v) => write!(f, "uncaught exception: {v}"),
            Outcome::Fault(e) => write!(f, "fault: {e}"),
        }
    }
}

/// Everything the engines must agree on.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RunResult {
    pub outcome: Outcome,
    pub output: Vec<u8>,
    pub minor_gcs: u64,
}

impl RunResult {
    pub fn from_exit(vm: &Vm, exit: Exit) -> RunResult {
        let outcome = match exit {
            Exit::Stop => Outcome::Value(render(vm.accu)),
            Exit::Uncaught(v) => Outcome::Exception(render(v)),
            Exit::Fault(f) => Outcome::Fault(f),
        };
        RunResult { outcome, output: vm.out.clone(), minor_gcs: vm.heap_stats().minor_collections }
    }

    pub fn output_str(&self) -> String {
        String::from_utf8_lossy(&self.output).into_owned()
    }
}

/// Engine-specific counters; these legitimately differ between engines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub counters: Counters,
    pub code_bytes: u64,
    pub compiles: u64,
    pub blocks: u64,
    pub translated: u64,
    pub duplicates: u64,
    pub sled_entries: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::{Heap, HeapConfig};

    #[test]
    fn ints_and_blocks() {
        let mut h = Heap::new(HeapConfig::default());
        assert_eq!(render(Value::of_int(-7)), "int -7");
        let b = h.alloc(3, 2, &mut ()).unwrap();
        unsafe {
            b.init_field(0, Value::of_int(1));
            b.init_field(1, h.atom(0));
        }
        assert_eq!(render(b), "block 3 [int 1; block 0 []]");
        let f = h.alloc_float(3.75, &mut ()).unwrap();
        assert_eq!(render(f), "float 3.75");
        let s = h.alloc_string(b"a\"b", &mut ()).unwrap();
        assert_eq!(render(s), "string \"a\\\"b\"");
    }

    #[test]
    fn cycles_are_cut() {
        let mut h = Heap::new(HeapConfig::default());
        let b = h.alloc(0, 1, &mut ()).unwrap();
        unsafe { b.init_field(0, b) };
        let r = render(b);
        assert!(r.ends_with("[...]]]]]]]"), "{r}");
    }
}
