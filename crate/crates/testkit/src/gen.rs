//! Random lambda programs that always terminate and never fault.
//!
//! Expressions are generated at a type: integers, blocks of integers of a
//! known size, and integer functions of a known arity. Loops and recursion
//! have literal bounds and a per-program budget keeps nesting cheap.

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ty {
    Int,
    Block(usize),
    Fun(usize),
}

const INT_OPS: &[&str] = &[
    "+", "-", "*", "/", "mod", "land", "lor", "lxor", "lsl", "lsr", "asr", "=", "<>", "<", "<=", ">", ">=",
];
const FLOAT_OPS: &[&str] = &["+.", "-.", "*.", "/."];
const FLOAT_CMPS: &[&str] = &["<.", "<=.", "=."];
const STRINGS: &[&str] = &["", "a", "hello", "zinc machine"];

pub struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    names: usize,
    /// Remaining loop and recursion constructs.
    heavy: u32,
    scope: Vec<(String, Ty)>,
}

/// A closed program of integer or block type.
pub fn program<R: Rng>(rng: &mut R, depth: u32) -> String {
    let mut g = Gen { rng, names: 0, heavy: 3, scope: Vec::new() };
    if g.rng.gen_bool(0.2) {
        let n = g.rng.gen_range(1..4);
        let fields: Vec<String> = (0..n).map(|_| g.int(depth)).collect();
        format!("(block {} {})", g.rng.gen_range(0..4), fields.join(" "))
    } else {
        g.int(depth)
    }
}

impl<R: Rng> Gen<'_, R> {
    fn fresh(&mut self) -> String {
        self.names += 1;
        format!("v{}", self.names)
    }

    fn vars(&self, ty: Ty) -> Vec<String> {
        self.scope.iter().filter(|(_, t)| *t == ty).map(|(n, _)| n.clone()).collect()
    }

    fn blocks(&self) -> Vec<(String, usize)> {
        self.scope
            .iter()
            .filter_map(|(n, t)| match t {
                Ty::Block(k) => Some((n.clone(), *k)),
                _ => None,
            })
            .collect()
    }

    fn funs(&self) -> Vec<(String, usize)> {
        self.scope
            .iter()
            .filter_map(|(n, t)| match t {
                Ty::Fun(k) => Some((n.clone(), *k)),
                _ => None,
            })
            .collect()
    }

    fn literal(&mut self) -> String {
        let n: i64 = match self.rng.gen_range(0..10) {
            0..=5 => self.rng.gen_range(-10..=10),
            6 | 7 => self.rng.gen_range(-100_000..=100_000),
            8 => self.rng.gen_range(-(1i64 << 40)..=(1i64 << 40)),
            _ => self.rng.gen_range(-(1i64 << 62) + 1..(1i64 << 62)),
        };
        n.to_string()
    }

    fn leaf(&mut self) -> String {
        let vs = self.vars(Ty::Int);
        if !vs.is_empty() && self.rng.gen_bool(0.6) {
            return vs.choose(self.rng).expect("non-empty").clone();
        }
        self.literal()
    }

    fn with<T>(&mut self, binds: &[(String, Ty)], f: impl FnOnce(&mut Self) -> T) -> T {
        let n = self.scope.len();
        self.scope.extend_from_slice(binds);
        let r = f(self);
        self.scope.truncate(n);
        r
    }

    /// An integer-valued expression.
    pub fn int(&mut self, depth: u32) -> String {
        if depth == 0 {
            return self.leaf();
        }
        let d = depth - 1;
        match self.rng.gen_range(0..22) {
            0 | 1 => self.leaf(),
            2..=4 => {
                let op = INT_OPS.choose(self.rng).expect("ops");
                format!("({op} {} {})", self.int(d), self.int(d))
            }
            5 => {
                let op = ["not", "neg", "isint"].choose(self.rng).expect("ops");
                format!("({op} {})", self.int(d))
            }
            6 => format!("(if {} {} {})", self.int(d), self.int(d), self.int(d)),
            7 => {
                let x = self.fresh();
                let init = self.int(d);
                let body = self.with(&[(x.clone(), Ty::Int)], |g| g.int(d));
                format!("(let ({x} {init}) {body})")
            }
            8 => {
                let x = self.fresh();
                let n = self.rng.gen_range(1..5);
                let fields: Vec<String> = (0..n).map(|_| self.int(d)).collect();
                let tag = self.rng.gen_range(0..3);
                let body = self.with(&[(x.clone(), Ty::Block(n))], |g| g.int(d));
                format!("(let ({x} (block {tag} {})) {body})", fields.join(" "))
            }
            9 => {
                let x = self.fresh();
                let k = self.rng.gen_range(1..4);
                let ps: Vec<String> = (0..k).map(|_| self.fresh()).collect();
                let binds: Vec<(String, Ty)> = ps.iter().map(|p| (p.clone(), Ty::Int)).collect();
                let body = self.with(&binds, |g| g.int(d));
                let rest = self.with(&[(x.clone(), Ty::Fun(k))], |g| g.call(d));
                format!("(let ({x} (fun ({}) {body})) {rest})", ps.join(" "))
            }
            10 => self.call(d),
            11 => match self.blocks().choose(self.rng).cloned() {
                Some((b, n)) => format!("(field {b} {})", self.rng.gen_range(0..n)),
                None => self.leaf(),
            },
            12 => match self.blocks().choose(self.rng).cloned() {
                Some((b, n)) => {
                    let i = self.rng.gen_range(0..n);
                    format!("(seq (setfield {b} {i} {}) {})", self.int(d), self.int(d))
                }
                None => self.leaf(),
            },
            13 => {
                let x = self.fresh();
                let body = self.int(d);
                let h0 = self.int(d);
                let h1 = self.with(&[(x.clone(), Ty::Block(1))], |g| g.int(d));
                format!("(try {body} ({x} (switch {x} (tags {h0} {h1}))))")
            }
            14 if self.rng.gen_bool(0.3) => format!("(raise (block 1 {}))", self.int(d)),
            15 => format!("(seq (prim print_int {}) (prim print_newline 0) {})", self.int(d), self.int(d)),
            16 if self.heavy > 0 => {
                self.heavy -= 1;
                self.for_loop(d)
            }
            17 if self.heavy > 0 => {
                self.heavy -= 1;
                self.letrec(d)
            }
            18 => {
                let mask = *[0usize, 1, 3].choose(self.rng).expect("masks");
                let s = self.int(d);
                let a: Vec<String> = (0..=mask).map(|_| self.int(d)).collect();
                format!("(switch (land {s} {mask}) (ints {}))", a.join(" "))
            }
            19 => {
                let s = STRINGS.choose(self.rng).expect("strings");
                if self.rng.gen_bool(0.5) {
                    format!("(prim string_length \"{s}\")")
                } else {
                    format!("(sget \"{s}\" (land {} 15))", self.int(d))
                }
            }
            20 => {
                let f = format!(
                    "({} (prim caml_float_of_int {}) (float {:?}))",
                    FLOAT_OPS.choose(self.rng).expect("ops"),
                    self.int(d),
                    self.rng.gen_range(-8.0f64..8.0),
                );
                if self.rng.gen_bool(0.5) {
                    format!("(prim caml_int_of_float {f})")
                } else {
                    let c = FLOAT_CMPS.choose(self.rng).expect("cmps");
                    format!("(if ({c} {f} (float 0.5)) {} {})", self.int(d), self.int(d))
                }
            }
            21 => {
                // A function returning a function, applied to both arguments at once.
                let (mk, a, b) = (self.fresh(), self.fresh(), self.fresh());
                let body = self.with(&[(a.clone(), Ty::Int), (b.clone(), Ty::Int)], |g| g.int(d));
                format!("(let ({mk} (fun ({a}) (fun ({b}) {body}))) ({mk} {} {}))", self.int(d), self.int(d))
            }
            _ => self.leaf(),
        }
    }

    /// Application of an in-scope function: exact, or partial then completed.
    fn call(&mut self, d: u32) -> String {
        let Some((f, k)) = self.funs().choose(self.rng).cloned() else {
            return self.leaf();
        };
        let args: Vec<String> = (0..k).map(|_| self.int(d)).collect();
        if k > 1 && self.rng.gen_bool(0.4) {
            let split = self.rng.gen_range(1..k);
            format!("(({f} {}) {})", args[..split].join(" "), args[split..].join(" "))
        } else {
            format!("({f} {})", args.join(" "))
        }
    }

    fn for_loop(&mut self, d: u32) -> String {
        let (acc, i) = (self.fresh(), self.fresh());
        let lo = self.rng.gen_range(-3..3);
        let hi = lo + self.rng.gen_range(-1..8);
        let body = self.with(&[(i.clone(), Ty::Int), (acc.clone(), Ty::Block(1))], |g| g.int(d));
        let op = ["+", "lxor", "-"].choose(self.rng).expect("ops");
        let init = self.int(d);
        format!("(let ({acc} (block 0 {init})) (seq (for {i} {lo} {hi} (setfield {acc} 0 ({op} (field {acc} 0) {body}))) (field {acc} 0)))")
    }

    fn letrec(&mut self, d: u32) -> String {
        let (f, n, a) = (self.fresh(), self.fresh(), self.fresh());
        let bound = self.rng.gen_range(0..12);
        let binds = [(n.clone(), Ty::Int), (a.clone(), Ty::Int)];
        let step = self.with(&binds, |g| g.int(d));
        let base = self.with(&binds, |g| g.int(d));
        let body = if self.rng.gen_bool(0.5) {
            format!("(if (<= {n} 0) {base} ({f} (- {n} 1) {step}))")
        } else {
            format!("(if (<= {n} 0) {base} (+ {step} ({f} (- {n} 1) {a})))")
        };
        let init = self.int(d);
        format!("(letrec (({f} (fun ({n} {a}) {body}))) ({f} {bound} {init}))")
    }
}
