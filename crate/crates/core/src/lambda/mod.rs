//! An untyped call-by-value lambda language and its compiler to bytecode.

mod compile;
mod parse;

pub use compile::{compile_lambda, CompileError};
pub use parse::{parse_lambda, ParseError};

use std::fmt;

/// A variable after resolution: the stamp makes every binding distinct.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ident {
    pub name: String,
    pub stamp: u32,
}

impl fmt::Display for Ident {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.stamp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    Lsl,
    Lsr,
    Asr,
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
    Not,
    Neg,
    IsInt,
    VGet,
    VSet,
    VLen,
    SGet,
    SSet,
    FAdd,
    FSub,
    FMul,
    FDiv,
    FEq,
    FLt,
    FLe,
}

impl PrimOp {
    pub const ALL: &'static [(PrimOp, &'static str, usize)] = &[
        (PrimOp::Add, "+", 2),
        (PrimOp::Sub, "-", 2),
        (PrimOp::Mul, "*", 2),
        (PrimOp::Div, "/", 2),
        (PrimOp::Mod, "mod", 2),
        (PrimOp::And, "land", 2),
        (PrimOp::Or, "lor", 2),
        (PrimOp::Xor, "lxor", 2),
        (PrimOp::Lsl, "lsl", 2),
        (PrimOp::Lsr, "lsr", 2),
        (PrimOp::Asr, "asr", 2),
        (PrimOp::Eq, "=", 2),
        (PrimOp::Neq, "<>", 2),
        (PrimOp::Lt, "<", 2),
        (PrimOp::Le, "<=", 2),
        (PrimOp::Gt, ">", 2),
        (PrimOp::Ge, ">=", 2),
        (PrimOp::Not, "not", 1),
        (PrimOp::Neg, "neg", 1),
        (PrimOp::IsInt, "isint", 1),
        (PrimOp::VGet, "vget", 2),
        (PrimOp::VSet, "vset", 3),
        (PrimOp::VLen, "vlen", 1),
        (PrimOp::SGet, "sget", 2),
        (PrimOp::SSet, "sset", 3),
        (PrimOp::FAdd, "+.", 2),
        (PrimOp::FSub, "-.", 2),
        (PrimOp::FMul, "*.", 2),
        (PrimOp::FDiv, "/.", 2),
        (PrimOp::FEq, "=.", 2),
        (PrimOp::FLt, "<.", 2),
        (PrimOp::FLe, "<=.", 2),
    ];

    pub fn from_name(s: &str) -> Option<(PrimOp, usize)> {
        let s = if s == "==" { "=" } else { s };
        PrimOp::ALL.iter().find(|e| e.1 == s).map(|e| (e.0, e.2))
    }

    pub fn name(self) -> &'static str {
        PrimOp::ALL.iter().find(|e| e.0 == self).expect("listed").1
    }

    /// Runtime primitive implementing a float operator.
    pub fn float_prim(self) -> Option<&'static str> {
        Some(match self {
            PrimOp::FAdd => "caml_add_float",
            PrimOp::FSub => "caml_sub_float",
            PrimOp::FMul => "caml_mul_float",
            PrimOp::FDiv => "caml_div_float",
            PrimOp::FEq => "caml_eq_float",
            PrimOp::FLt => "caml_lt_float",
            PrimOp::FLe => "caml_le_float",
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecBinding {
    pub name: Ident,
    pub params: Vec<Ident>,
    pub body: Expr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Var(Ident),
    Int(i64),
    Str(Vec<u8>),
    Float(f64),
    Let(Ident, Box<Expr>, Box<Expr>),
    LetRec(Vec<RecBinding>, Box<Expr>),
    Fun(Vec<Ident>, Box<Expr>),
    Apply(Box<Expr>, Vec<Expr>),
    Prim(PrimOp, Vec<Expr>),
    /// Call of a runtime primitive by name.
    CCall(String, Vec<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    /// Scrutinee, arms for ints `0..`, arms for block tags `0..`.
    Switch(Box<Expr>, Vec<Expr>, Vec<Expr>),
    Seq(Vec<Expr>),
    While(Box<Expr>, Box<Expr>),
    For(Ident, Box<Expr>, Box<Expr>, Box<Expr>),
    Raise(Box<Expr>),
    TryWith(Box<Expr>, Ident, Box<Expr>),
    MakeBlock(u8, Vec<Expr>),
    Field(Box<Expr>, usize),
    SetField(Box<Expr>, usize, Box<Expr>),
    FloatArray(Vec<Expr>),
    FloatField(Box<Expr>, usize),
    SetFloatField(Box<Expr>, usize, Box<Expr>),
    /// `(method obj index)`: index-th entry of the table in field 0 of obj.
    Method(Box<Expr>, Box<Expr>),
}

fn list(f: &mut fmt::Formatter<'_>, head: &str, items: &[Expr]) -> fmt::Result {
    write!(f, "({head}")?;
    for i in items {
        write!(f, " {i}")?;
    }
    f.write_str(")")
}

fn idents(ids: &[Ident]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(x) => write!(f, "{x}"),
            Expr::Int(n) => write!(f, "{n}"),
            Expr::Str(s) => f.write_str(&crate::bytecode::asm::escape_bytes(s)),
            Expr::Float(d) => write!(f, "(float {d:?})"),
            Expr::Let(x, e, b) => write!(f, "(let ({x} {e}) {b})"),
            Expr::LetRec(bs, b) => {
                f.write_str("(letrec (")?;
                for (i, r) in bs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "({} (fun ({}) {}))", r.name, idents(&r.params), r.body)?;
                }
                write!(f, ") {b})")
            }
            Expr::Fun(ps, b) => write!(f, "(fun ({}) {b})", idents(ps)),
            Expr::Apply(g, args) => {
                write!(f, "({g}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                f.write_str(")")
            }
            Expr::Prim(op, args) => list(f, op.name(), args),
            Expr::CCall(name, args) => list(f, &format!("prim {name}"), args),
            Expr::If(c, t, e) => write!(f, "(if {c} {t} {e})"),
            Expr::Switch(s, ints, tags) => {
                write!(f, "(switch {s} ")?;
                list(f, "ints", ints)?;
                f.write_str(" ")?;
                list(f, "tags", tags)?;
                f.write_str(")")
            }
            Expr::Seq(es) => list(f, "seq", es),
            Expr::While(c, b) => write!(f, "(while {c} {b})"),
            Expr::For(i, lo, hi, b) => write!(f, "(for {i} {lo} {hi} {b})"),
            Expr::Raise(e) => write!(f, "(raise {e})"),
            Expr::TryWith(b, x, h) => write!(f, "(try {b} ({x} {h}))"),
            Expr::MakeBlock(tag, es) => list(f, &format!("block {tag}"), es),
            Expr::Field(e, i) => write!(f, "(field {e} {i})"),
            Expr::SetField(e, i, v) => write!(f, "(setfield {e} {i} {v})"),
            Expr::FloatArray(es) => list(f, "floatarray", es),
            Expr::FloatField(e, i) => write!(f, "(fget {e} {i})"),
            Expr::SetFloatField(e, i, v) => write!(f, "(fset {e} {i} {v})"),
            Expr::Method(o, i) => write!(f, "(method {o} {i})"),
        }
    }
}
