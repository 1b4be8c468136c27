//! Random allocations, barriered stores and minor collections, checked
//! against a shadow copy of the object graph.
//!
//! Every block is `[id; f1 .. fk]` so a node can be identified wherever the
//! collector moved it.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::HashMap;
use zvm_core::heap::{Heap, HeapConfig};
use zvm_core::value::Value;

const ROOTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
enum S {
    Int(i64),
    Ref(usize),
}

struct Shadow {
    nodes: Vec<Vec<S>>,
    roots: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FuzzStats {
    pub nodes: usize,
    pub stores: usize,
    /// Collections requested explicitly.
    pub collections: u64,
    /// All minor collections, including those forced by allocation.
    pub minor_collections: u64,
    /// Largest remembered set seen just before a collection.
    pub max_remembered: usize,
}

fn root_value(roots: &[Value], sh: &Shadow, i: usize) -> (Value, S) {
    match sh.roots[i] {
        Some(id) => (roots[i], S::Ref(id)),
        None => (Value::of_int(i as i64), S::Int(i as i64)),
    }
}

macro_rules! ensure {
    ($c:expr, $($fmt:tt)*) => {
        if !$c {
            return Err(format!($($fmt)*));
        }
    };
}

/// Walks the heap from the roots and compares it with the shadow graph.
/// Sharing must be preserved: one node, one address.
fn check(heap: &Heap, roots: &[Value], sh: &Shadow, after_collect: bool) -> Result<(), String> {
    let mut seen: HashMap<usize, u64> = HashMap::new();
    let mut work: Vec<(Value, usize)> = Vec::new();
    for (i, r) in sh.roots.iter().enumerate() {
        match r {
            Some(id) => work.push((roots[i], *id)),
            None => ensure!(roots[i].is_int(), "root {i} should be an integer"),
        }
    }
    while let Some((v, id)) = work.pop() {
        ensure!(v.is_block(), "node {id} is not a block");
        if let Some(&addr) = seen.get(&id) {
            ensure!(addr == v.raw(), "node {id} was duplicated");
            continue;
        }
        seen.insert(id, v.raw());
        ensure!(!(after_collect && heap.is_young(v)), "node {id} left in the minor heap");
        let fields = &sh.nodes[id];
        // SAFETY: v is a live block reachable from the roots.
        let size = unsafe { v.header() }.size();
        ensure!(size == fields.len() + 1, "node {id}: size {size}, expected {}", fields.len() + 1);
        let tag = unsafe { v.field(0) };
        ensure!(tag.is_int() && tag.as_int() == id as i64, "node {id}: id field holds {:#x}", tag.raw());
        for (k, s) in fields.iter().enumerate() {
            let f = unsafe { v.field(k + 1) };
            match *s {
                S::Int(n) => ensure!(f.is_int() && f.as_int() == n, "node {id} field {k}: expected int {n}"),
                S::Ref(j) => work.push((f, j)),
            }
        }
    }
    Ok(())
}

/// Runs `steps` random heap operations on a 2 KiB minor heap.
pub fn run(seed: u64, steps: usize) -> Result<FuzzStats, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut heap = Heap::new(HeapConfig { minor_bytes: 2048, ..HeapConfig::default() });
    let mut roots: Vec<Value> = (0..ROOTS as i64).map(Value::of_int).collect();
    let mut sh = Shadow { nodes: Vec::new(), roots: vec![None; ROOTS] };
    let mut st = FuzzStats::default();
    let err = |e: zvm_core::heap::HeapError| e.to_string();
    for step in 0..steps {
        match rng.gen_range(0..16) {
            0..=4 => {
                let major = rng.gen_range(0..5) == 0;
                let k = rng.gen_range(1..5);
                let id = sh.nodes.len();
                let v = if major { heap.alloc_major(0, k + 1).map_err(err)? } else { heap.alloc(0, k + 1, &mut roots).map_err(err)? };
                let mut fields = Vec::with_capacity(k);
                heap.set_field(v, 0, Value::of_int(id as i64)).map_err(err)?;
                for f in 0..k {
                    let (fv, fs) = root_value(&roots, &sh, rng.gen_range(0..ROOTS));
                    if major {
                        heap.set_field(v, f + 1, fv).map_err(err)?;
                    } else {
                        // SAFETY: v is fresh; young-to-anything needs no barrier.
                        unsafe { v.init_field(f + 1, fv) };
                    }
                    fields.push(fs);
                }
                sh.nodes.push(fields);
                let slot = rng.gen_range(0..ROOTS);
                roots[slot] = v;
                sh.roots[slot] = Some(id);
            }
            5..=10 => {
                let a = rng.gen_range(0..ROOTS);
                if let Some(id) = sh.roots[a] {
                    let k = rng.gen_range(0..sh.nodes[id].len());
                    let (fv, fs) = root_value(&roots, &sh, rng.gen_range(0..ROOTS));
                    heap.set_field(roots[a], k + 1, fv).map_err(err)?;
                    sh.nodes[id][k] = fs;
                    st.stores += 1;
                }
            }
            11 => {
                // Follow a pointer so deeper nodes become roots.
                let a = rng.gen_range(0..ROOTS);
                if let Some(id) = sh.roots[a] {
                    let k = rng.gen_range(0..sh.nodes[id].len());
                    if let S::Ref(j) = sh.nodes[id][k] {
                        roots[a] = unsafe { roots[a].field(k + 1) };
                        sh.roots[a] = Some(j);
                    }
                }
            }
            12 => {
                let a = rng.gen_range(0..ROOTS);
                roots[a] = Value::of_int(a as i64);
                sh.roots[a] = None;
            }
            13 => {
                let (a, b) = (rng.gen_range(0..ROOTS), rng.gen_range(0..ROOTS));
                sh.roots[a] = sh.roots[b];
                roots[a] = if sh.roots[a].is_some() { roots[b] } else { Value::of_int(a as i64) };
            }
            14 => {
                st.max_remembered = st.max_remembered.max(heap.remembered_len());
                heap.minor_collect(&mut roots).map_err(err)?;
                ensure!(heap.remembered_len() == 0, "remembered set not cleared at step {step}");
                st.collections += 1;
                check(&heap, &roots, &sh, true).map_err(|e| format!("step {step}: {e}"))?;
            }
            _ => {}
        }
        if step % 64 == 0 {
            check(&heap, &roots, &sh, false).map_err(|e| format!("step {step}: {e}"))?;
        }
    }
    heap.minor_collect(&mut roots).map_err(err)?;
    check(&heap, &roots, &sh, true)?;
    st.nodes = sh.nodes.len();
    st.minor_collections = heap.stats().minor_collections;
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_collects_and_remembers() {
        let st = run(3, 2000).unwrap();
        assert!(st.collections > 0);
        assert!(st.minor_collections > st.collections);
        assert!(st.max_remembered > 0);
    }
}
