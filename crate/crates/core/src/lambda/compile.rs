use super::{Expr, Ident, PrimOp, RecBinding};
use crate::bytecode::{Arity, EncodeError, GlobalInit, Instr, Opcode, Segment};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

/// Largest argument count of a single application or function.
pub const MAX_ARGS: usize = 250;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("{count} arguments exceed the limit of {MAX_ARGS}")]
    TooManyArguments { count: usize },
    #[error("unbound variable {0}")]
    UnboundVariable(Ident),
    #[error("integer {0} out of range")]
    IntOutOfRange(i64),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Clone, Copy, Debug)]
enum Loc {
    /// Stack slot counted from the bottom of the current frame.
    Stack(usize),
    Env(i64),
    /// Sibling closure in a recursive group, as an OFFSETCLOSURE operand.
    Rec(i64),
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Label(usize);

struct Pending<'a> {
    label: Label,
    params: &'a [Ident],
    body: &'a Expr,
    env: HashMap<Ident, Loc>,
}

struct Compiler<'a> {
    code: Vec<Instr>,
    fixups: Vec<(usize, usize, Label)>,
    labels: Vec<Option<usize>>,
    globals: Vec<GlobalInit>,
    prims: Vec<String>,
    queue: VecDeque<Pending<'a>>,
    vars: HashMap<Ident, Loc>,
    sz: usize,
}

fn free_vars(e: &Expr) -> Vec<Ident> {
    fn go(e: &Expr, bound: &mut Vec<Ident>, out: &mut Vec<Ident>) {
        let under = |ids: &[Ident], es: &[&Expr], bound: &mut Vec<Ident>, out: &mut Vec<Ident>| {
            let n = bound.len();
            bound.extend_from_slice(ids);
            for e in es {
                go(e, bound, out);
            }
            bound.truncate(n);
        };
        match e {
            Expr::Var(x) => {
                if !bound.contains(x) && !out.contains(x) {
                    out.push(x.clone());
                }
            }
            Expr::Int(_) | Expr::Str(_) | Expr::Float(_) => {}
            Expr::Let(x, init, body) => {
                go(init, bound, out);
                under(std::slice::from_ref(x), &[body], bound, out);
            }
            Expr::LetRec(bs, body) => {
                let names: Vec<Ident> = bs.iter().map(|b| b.name.clone()).collect();
                let n = bound.len();
                bound.extend(names);
                for b in bs {
                    under(&b.params, &[&b.body], bound, out);
                }
                go(body, bound, out);
                bound.truncate(n);
            }
            Expr::Fun(ps, body) => under(ps, &[body], bound, out),
            Expr::For(i, lo, hi, body) => {
                go(hi, bound, out);
                go(lo, bound, out);
                under(std::slice::from_ref(i), &[body], bound, out);
            }
            Expr::TryWith(body, x, h) => {
                go(body, bound, out);
                under(std::slice::from_ref(x), &[h], bound, out);
            }
            _ => {
                for c in children(e) {
                    go(c, bound, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    go(e, &mut Vec::new(), &mut out);
    out
}

/// Subexpressions of binder-free nodes.
fn children(e: &Expr) -> Vec<&Expr> {
    match e {
        Expr::Apply(f, args) => std::iter::once(&**f).chain(args).collect(),
        Expr::Prim(_, a) | Expr::CCall(_, a) | Expr::Seq(a) | Expr::MakeBlock(_, a) | Expr::FloatArray(a) => {
            a.iter().collect()
        }
        Expr::If(c, t, f) => vec![c, t, f],
        Expr::Switch(s, ints, tags) => std::iter::once(&**s).chain(ints).chain(tags).collect(),
        Expr::While(c, b) | Expr::Method(c, b) => vec![c, b],
        Expr::SetField(a, _, b) | Expr::SetFloatField(a, _, b) => vec![a, b],
        Expr::Raise(a) | Expr::Field(a, _) | Expr::FloatField(a, _) => vec![a],
        _ => vec![],
    }
}

impl<'a> Compiler<'a> {
    fn new_label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    fn place(&mut self, l: Label) {
        self.labels[l.0] = Some(self.code.len());
    }

    fn op(&mut self, op: Opcode, args: &[i64]) {
        self.code.push(Instr::new(op, args));
    }

    /// Emits `op` whose argument `arg` is a code offset to `l`.
    fn jump(&mut self, op: Opcode, args: &[i64], arg: usize, l: Label) {
        self.fixups.push((self.code.len(), arg, l));
        self.op(op, args);
    }

    fn push(&mut self) {
        self.op(Opcode::Push, &[]);
        self.sz += 1;
    }

    fn pop(&mut self, n: usize) {
        if n > 0 {
            self.op(Opcode::Pop, &[n as i64]);
            self.sz -= n;
        }
    }

    fn ret(&mut self, tail: bool) {
        if tail {
            self.op(Opcode::Return, &[self.sz as i64]);
        }
    }

    fn bind(&mut self, x: &Ident, loc: Loc) -> Option<Loc> {
        self.vars.insert(x.clone(), loc)
    }

    fn unbind(&mut self, x: &Ident, prev: Option<Loc>) {
        match prev {
            Some(l) => self.vars.insert(x.clone(), l),
            None => self.vars.remove(x),
        };
    }

    fn load(&mut self, x: &Ident) -> Result<(), CompileError> {
        match self.vars.get(x).copied() {
            Some(Loc::Stack(s)) => self.op(Opcode::Acc, &[(self.sz - 1 - s) as i64]),
            Some(Loc::Env(i)) => self.op(Opcode::EnvAcc, &[i]),
            Some(Loc::Rec(n)) => self.op(Opcode::OffsetClosure, &[n]),
            None => return Err(CompileError::UnboundVariable(x.clone())),
        }
        Ok(())
    }

    fn global(&mut self, g: GlobalInit) -> i64 {
        self.globals.push(g);
        self.globals.len() as i64 - 1
    }

    fn prim(&mut self, name: &str) -> i64 {
        match self.prims.iter().position(|p| p == name) {
            Some(i) => i as i64,
            None => {
                self.prims.push(name.to_string());
                self.prims.len() as i64 - 1
            }
        }
    }

    /// Evaluates `es` right to left, leaving the first in accu and the rest
    /// on the stack in order.
    fn args(&mut self, es: &'a [Expr]) -> Result<(), CompileError> {
        for e in es[1..].iter().rev() {
            self.expr(e, false)?;
            self.push();
        }
        self.expr(&es[0], false)
    }

    fn int(&mut self, n: i64) -> Result<(), CompileError> {
        if n <= -crate::value::INT_LIMIT || n >= crate::value::INT_LIMIT {
            return Err(CompileError::IntOutOfRange(n));
        }
        if let Ok(small) = i32::try_from(n) {
            self.op(Opcode::ConstInt, &[small as i64]);
        } else {
            self.op(Opcode::ConstInt, &[31]);
            self.push();
            self.op(Opcode::ConstInt, &[n >> 31]);
            self.op(Opcode::LslInt, &[]);
            self.sz -= 1;
            self.op(Opcode::OffsetInt, &[n & 0x7FFF_FFFF]);
        }
        Ok(())
    }

    fn closure_vars(&mut self, fvs: &[Ident]) -> Result<(), CompileError> {
        if let Some((first, rest)) = fvs.split_first() {
            for v in rest.iter().rev() {
                self.load(v)?;
                self.push();
            }
            self.load(first)?;
            self.sz -= rest.len();
        }
        Ok(())
    }

    fn expr(&mut self, e: &'a Expr, tail: bool) -> Result<(), CompileError> {
        match e {
            Expr::Var(x) => {
                self.load(x)?;
                self.ret(tail);
            }
            Expr::Int(n) => {
                self.int(*n)?;
                self.ret(tail);
            }
            Expr::Str(s) => {
                let g = self.global(GlobalInit::Str(s.clone()));
                self.op(Opcode::GetGlobal, &[g]);
                self.ret(tail);
            }
            Expr::Float(d) => {
                let g = self.global(GlobalInit::Str(format!("{d:?}").into_bytes()));
                self.op(Opcode::GetGlobal, &[g]);
                let p = self.prim("caml_float_of_string");
                self.op(Opcode::CCall, &[p, 1]);
                self.ret(tail);
            }
            Expr::Let(x, init, body) => {
                self.expr(init, false)?;
                self.push();
                let prev = self.bind(x, Loc::Stack(self.sz - 1));
                self.expr(body, tail)?;
                self.unbind(x, prev);
                if tail {
                    self.sz -= 1;
                } else {
                    self.pop(1);
                }
            }
            Expr::LetRec(bs, body) => self.letrec(bs, body, tail)?,
            Expr::Fun(ps, body) => {
                if ps.len() > MAX_ARGS {
                    return Err(CompileError::TooManyArguments { count: ps.len() });
                }
                let fvs = free_vars(e);
                self.closure_vars(&fvs)?;
                let label = self.new_label();
                self.jump(Opcode::Closure, &[fvs.len() as i64, 0], 1, label);
                let env = fvs.iter().enumerate().map(|(j, v)| (v.clone(), Loc::Env(j as i64 + 1))).collect();
                self.queue.push_back(Pending { label, params: ps, body, env });
                self.ret(tail);
            }
            Expr::Apply(f, args) => {
                let n = args.len();
                if n > MAX_ARGS {
                    return Err(CompileError::TooManyArguments { count: n });
                }
                for a in args.iter().rev() {
                    self.expr(a, false)?;
                    self.push();
                }
                self.expr(f, false)?;
                if tail {
                    self.op(Opcode::AppTerm, &[n as i64, self.sz as i64]);
                } else {
                    self.op(Opcode::Apply, &[n as i64]);
                }
                self.sz -= n;
            }
            Expr::Prim(op, args) => {
                self.primop(*op, args)?;
                self.ret(tail);
            }
            Expr::CCall(name, args) => {
                self.args(args)?;
                let p = self.prim(name);
                self.op(Opcode::CCall, &[p, args.len() as i64]);
                self.sz -= args.len() - 1;
                self.ret(tail);
            }
            Expr::If(c, t, f) => {
                self.expr(c, false)?;
                let (lelse, lend) = (self.new_label(), self.new_label());
                self.jump(Opcode::BranchIfNot, &[0], 0, lelse);
                self.expr(t, tail)?;
                if !tail {
                    self.jump(Opcode::Branch, &[0], 0, lend);
                }
                self.place(lelse);
                self.expr(f, tail)?;
                self.place(lend);
            }
            Expr::Switch(s, ints, tags) => {
                self.expr(s, false)?;
                let arms: Vec<&'a Expr> = ints.iter().chain(tags).collect();
                let labels: Vec<Label> = arms.iter().map(|_| self.new_label()).collect();
                let at = self.code.len();
                let mut args = vec![ints.len() as i64, tags.len() as i64];
                args.extend(std::iter::repeat_n(0, arms.len()));
                self.op(Opcode::Switch, &args);
                for (i, l) in labels.iter().enumerate() {
                    self.fixups.push((at, i + 2, *l));
                }
                let lend = self.new_label();
                for (arm, l) in arms.into_iter().zip(labels) {
                    self.place(l);
                    self.expr(arm, tail)?;
                    if !tail {
                        self.jump(Opcode::Branch, &[0], 0, lend);
                    }
                }
                self.place(lend);
            }
            Expr::Seq(es) => {
                let (last, init) = es.split_last().expect("non-empty seq");
                for e in init {
                    self.expr(e, false)?;
                }
                self.expr(last, tail)?;
            }
            Expr::While(c, body) => {
                let (ltest, lloop) = (self.new_label(), self.new_label());
                self.jump(Opcode::Branch, &[0], 0, ltest);
                self.place(lloop);
                self.op(Opcode::CheckSignals, &[]);
                self.expr(body, false)?;
                self.place(ltest);
                self.expr(c, false)?;
                self.jump(Opcode::BranchIf, &[0], 0, lloop);
                self.op(Opcode::ConstInt, &[0]);
                self.ret(tail);
            }
            Expr::For(i, lo, hi, body) => {
                self.expr(hi, false)?;
                self.push();
                self.expr(lo, false)?;
                self.push();
                let prev = self.bind(i, Loc::Stack(self.sz - 1));
                let (ltest, lloop) = (self.new_label(), self.new_label());
                self.jump(Opcode::Branch, &[0], 0, ltest);
                self.place(lloop);
                self.op(Opcode::CheckSignals, &[]);
                self.expr(body, false)?;
                self.op(Opcode::Acc, &[0]);
                self.op(Opcode::OffsetInt, &[1]);
                self.op(Opcode::Assign, &[0]);
                self.place(ltest);
                self.op(Opcode::Acc, &[1]);
                self.op(Opcode::Push, &[]);
                self.op(Opcode::Acc, &[1]);
                self.op(Opcode::LeInt, &[]);
                self.jump(Opcode::BranchIf, &[0], 0, lloop);
                self.unbind(i, prev);
                self.pop(2);
                self.op(Opcode::ConstInt, &[0]);
                self.ret(tail);
            }
            Expr::Raise(x) => {
                self.expr(x, false)?;
                self.op(Opcode::Raise, &[]);
            }
            Expr::TryWith(body, x, handler) => {
                let (lh, lend) = (self.new_label(), self.new_label());
                self.jump(Opcode::PushTrap, &[0], 0, lh);
                self.sz += 4;
                self.expr(body, false)?;
                self.op(Opcode::PopTrap, &[]);
                self.sz -= 4;
                self.jump(Opcode::Branch, &[0], 0, lend);
                self.place(lh);
                self.push();
                let prev = self.bind(x, Loc::Stack(self.sz - 1));
                self.expr(handler, false)?;
                self.unbind(x, prev);
                self.pop(1);
                self.place(lend);
                self.ret(tail);
            }
            Expr::MakeBlock(tag, es) => {
                if es.is_empty() {
                    self.op(Opcode::Atom, &[*tag as i64]);
                } else {
                    self.args(es)?;
                    self.op(Opcode::MakeBlock, &[*tag as i64, es.len() as i64]);
                    self.sz -= es.len() - 1;
                }
                self.ret(tail);
            }
            Expr::FloatArray(es) => {
                if es.is_empty() {
                    self.op(Opcode::Atom, &[0]);
                } else {
                    self.args(es)?;
                    self.op(Opcode::MakeFloatBlock, &[es.len() as i64]);
                    self.sz -= es.len() - 1;
                }
                self.ret(tail);
            }
            Expr::Field(x, i) | Expr::FloatField(x, i) => {
                self.expr(x, false)?;
                let op = if matches!(e, Expr::Field(..)) { Opcode::GetField } else { Opcode::GetFloatField };
                self.op(op, &[*i as i64]);
                self.ret(tail);
            }
            Expr::SetField(x, i, v) | Expr::SetFloatField(x, i, v) => {
                self.expr(v, false)?;
                self.push();
                self.expr(x, false)?;
                let op = if matches!(e, Expr::SetField(..)) { Opcode::SetField } else { Opcode::SetFloatField };
                self.op(op, &[*i as i64]);
                self.sz -= 1;
                self.ret(tail);
            }
            Expr::Method(obj, idx) => {
                self.expr(obj, false)?;
                self.push();
                self.expr(idx, false)?;
                self.op(Opcode::GetMethod, &[]);
                self.pop(1);
                self.ret(tail);
            }
        }
        Ok(())
    }

    fn primop(&mut self, op: PrimOp, args: &'a [Expr]) -> Result<(), CompileError> {
        use Opcode as O;
        if let Some(name) = op.float_prim() {
            self.args(args)?;
            let p = self.prim(name);
            self.op(O::CCall, &[p, 2]);
            self.sz -= 1;
            return Ok(());
        }
        if op == PrimOp::Add {
            if let Expr::Int(c) = args[1] {
                if let Ok(c) = i32::try_from(c) {
                    self.expr(&args[0], false)?;
                    self.op(O::OffsetInt, &[c as i64]);
                    return Ok(());
                }
            }
        }
        let code = match op {
            PrimOp::Add => O::AddInt,
            PrimOp::Sub => O::SubInt,
            PrimOp::Mul => O::MulInt,
            PrimOp::Div => O::DivInt,
            PrimOp::Mod => O::ModInt,
            PrimOp::And => O::AndInt,
            PrimOp::Or => O::OrInt,
            PrimOp::Xor => O::XorInt,
            PrimOp::Lsl => O::LslInt,
            PrimOp::Lsr => O::LsrInt,
            PrimOp::Asr => O::AsrInt,
            PrimOp::Eq => O::Eq,
            PrimOp::Neq => O::Neq,
            PrimOp::Lt => O::LtInt,
            PrimOp::Le => O::LeInt,
            PrimOp::Gt => O::GtInt,
            PrimOp::Ge => O::GeInt,
            PrimOp::Not => O::BoolNot,
            PrimOp::Neg => O::NegInt,
            PrimOp::IsInt => O::IsInt,
            PrimOp::VGet => O::GetVectItem,
            PrimOp::VSet => O::SetVectItem,
            PrimOp::VLen => O::VectLength,
            PrimOp::SGet => O::GetStringChar,
            PrimOp::SSet => O::SetStringChar,
            _ => unreachable!("float operators handled above"),
        };
        self.args(args)?;
        self.op(code, &[]);
        self.sz -= args.len() - 1;
        Ok(())
    }

    fn letrec(&mut self, bs: &'a [RecBinding], body: &'a Expr, tail: bool) -> Result<(), CompileError> {
        let f = bs.len();
        let whole = Expr::LetRec(bs.to_vec(), Box::new(Expr::Int(0)));
        let fvs = free_vars(&whole);
        self.closure_vars(&fvs)?;
        let labels: Vec<Label> = bs.iter().map(|_| self.new_label()).collect();
        let at = self.code.len();
        let mut args = vec![f as i64, fvs.len() as i64];
        args.extend(std::iter::repeat_n(0, f));
        self.op(Opcode::ClosureRec, &args);
        for (i, l) in labels.iter().enumerate() {
            self.fixups.push((at, i + 2, *l));
        }
        for (i, (b, label)) in bs.iter().zip(labels).enumerate() {
            if b.params.len() > MAX_ARGS {
                return Err(CompileError::TooManyArguments { count: b.params.len() });
            }
            let mut env = HashMap::new();
            for (m, other) in bs.iter().enumerate() {
                env.insert(other.name.clone(), Loc::Rec(2 * m as i64 - 2 * i as i64));
            }
            for (j, v) in fvs.iter().enumerate() {
                env.insert(v.clone(), Loc::Env(2 * f as i64 - 2 + (j as i64 + 1) - 2 * i as i64));
            }
            self.queue.push_back(Pending { label, params: &b.params, body: &b.body, env });
        }
        let mut prevs = Vec::new();
        for b in bs {
            self.sz += 1;
            prevs.push(self.bind(&b.name, Loc::Stack(self.sz - 1)));
        }
        self.expr(body, tail)?;
        for (b, prev) in bs.iter().zip(prevs).rev() {
            self.unbind(&b.name, prev);
        }
        if tail {
            self.sz -= f;
        } else {
            self.pop(f);
        }
        Ok(())
    }

    fn function(&mut self, p: Pending<'a>) -> Result<(), CompileError> {
        let n = p.params.len();
        self.vars = p.env;
        for (i, x) in p.params.iter().enumerate() {
            self.vars.insert(x.clone(), Loc::Stack(n - 1 - i));
        }
        self.sz = n;
        if n > 1 {
            self.op(Opcode::Restart, &[]);
            self.place(p.label);
            self.op(Opcode::Grab, &[n as i64 - 1]);
        } else {
            self.place(p.label);
        }
        self.expr(p.body, true)
    }

    fn finish(mut self) -> Result<Segment, CompileError> {
        let mut pos = Vec::with_capacity(self.code.len() + 1);
        let mut at = 0;
        for i in &self.code {
            pos.push(at);
            at += match i.op.arity() {
                Arity::Fixed(k) => 1 + k.len(),
                Arity::ClosureRec => 1 + i.args.len(),
                Arity::Switch => i.args.len(),
            };
        }
        pos.push(at);
        for (idx, arg, l) in std::mem::take(&mut self.fixups) {
            let instr = &mut self.code[idx];
            let word = if instr.op == Opcode::Switch { arg } else { arg + 1 };
            let base = instr
                .offset_slots()
                .into_iter()
                .find(|(w, _)| *w == word)
                .map(|(_, b)| b)
                .expect("fixup on an offset operand");
            let target = pos[self.labels[l.0].expect("placed label")];
            instr.args[arg] = target as i64 - (pos[idx] + base) as i64;
        }
        let mut seg = Segment::from_instrs(&self.code)?;
        seg.globals = self.globals;
        seg.prims = self.prims;
        Ok(seg)
    }
}

/// Compiles a closed expression to a segment that leaves its value in accu
/// and stops.
pub fn compile_lambda(e: &Expr) -> Result<Segment, CompileError> {
    let mut c = Compiler {
        code: Vec::new(),
        fixups: Vec::new(),
        labels: Vec::new(),
        globals: Vec::new(),
        prims: Vec::new(),
        queue: VecDeque::new(),
        vars: HashMap::new(),
        sz: 0,
    };
    c.expr(e, false)?;
    c.op(Opcode::Stop, &[]);
    if !c.queue.is_empty() {
        while let Some(p) = c.queue.pop_front() {
            c.function(p)?;
        }
        c.op(Opcode::Stop, &[]);
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::validate::validate;
    use crate::interp::{Exit, Vm, VmConfig};
    use crate::lambda::parse_lambda;
    use crate::prims::Registry;
    use crate::value::Value;

    fn compile(src: &str) -> Segment {
        let seg = compile_lambda(&parse_lambda(src).unwrap()).unwrap();
        assert_eq!(validate(&seg), vec![], "{src}");
        seg
    }

    fn eval(src: &str) -> (Exit, Value, Vec<u8>) {
        let seg = compile(src);
        let mut vm = Vm::new(&seg, &Registry::builtins(), &VmConfig::default()).unwrap();
        let exit = vm.run_switch(0);
        (exit, vm.accu, std::mem::take(&mut vm.out))
    }

    fn int(src: &str) -> i64 {
        let (exit, v, _) = eval(src);
        assert!(matches!(exit, Exit::Stop), "{src}: {exit:?}");
        v.as_int()
    }

    #[test]
    fn fig4_instruction_sequence() {
        use Opcode::*;
        let seg = compile("(let (x 1) (+ x 3))");
        let ops: Vec<Instr> = seg.instructions().unwrap().into_iter().map(|(_, i)| i).collect();
        assert_eq!(
            ops,
            vec![
                Instr::new(ConstInt, &[1]),
                Instr::new(Push, &[]),
                Instr::new(Acc, &[0]),
                Instr::new(OffsetInt, &[3]),
                Instr::new(Pop, &[1]),
                Instr::new(Stop, &[]),
            ]
        );
        assert_eq!(int("(let (x 1) (+ x 3))"), 4);
    }

    #[test]
    fn arithmetic_order() {
        assert_eq!(int("(- 10 3)"), 7);
        assert_eq!(int("(/ -7 2)"), -3);
        assert_eq!(int("(mod -7 2)"), -1);
        assert_eq!(int("(< 1 2)"), 1);
        assert_eq!(int("(lsl 1 62)"), -(1 << 62));
        assert_eq!(int("4611686018427387903"), (1 << 62) - 1);
        assert_eq!(int("-4611686018427387903"), -(1 << 62) + 1);
    }

    #[test]
    fn closures_and_partial_application() {
        assert_eq!(int("(let (a 5) ((fun (x) (+ x a)) 2))"), 7);
        assert_eq!(int("(let (f (fun (x y z) (- (* x y) z))) (let (g (f 3)) ((g 4) 5)))"), 7);
        assert_eq!(int("((fun (x) (fun (y) (- x y))) 10 4)"), 6);
    }

    #[test]
    fn mutual_recursion() {
        let src = "(letrec ((even (fun (n) (if (= n 0) 1 (odd (- n 1)))))
                            (odd (fun (n) (if (= n 0) 0 (even (- n 1))))))
                     (even 10))";
        assert_eq!(int(src), 1);
        let src = "(let (k 3) (letrec ((f (fun (n) (if (= n 0) k (g (- n 1)))))
                                       (g (fun (n) (+ k (f n)))))
                     (f 4)))";
        assert_eq!(int(src), 15);
    }

    #[test]
    fn million_tail_calls_in_constant_stack() {
        let src = "(letrec ((loop (fun (n acc) (if (= n 0) acc (loop (- n 1) (+ acc 1)))))) (loop 1000000 0))";
        let seg = compile(src);
        let config = VmConfig { stack_slots: 1024, ..VmConfig::default() };
        let mut vm = Vm::new(&seg, &Registry::builtins(), &config).unwrap();
        assert!(matches!(vm.run_switch(0), Exit::Stop));
        assert_eq!(vm.accu.as_int(), 1_000_000);
    }

    #[test]
    fn loops_switch_and_exceptions() {
        assert_eq!(int("(let (b (block 0 0)) (seq (for i 1 10 (setfield b 0 (+ (field b 0) i))) (field b 0)))"), 55);
        assert_eq!(
            int("(let (b (block 0 3)) (seq (while (> (field b 0) 0) (setfield b 0 (- (field b 0) 1))) (field b 0)))"),
            0
        );
        assert_eq!(int("(switch 1 (ints 10 20 30))"), 20);
        assert_eq!(int("(switch (block 1 7) (ints 0) (tags 5 (field (block 0 9) 0)))"), 9);
        assert_eq!(int("(try (+ 1 (raise 41)) (e (+ e 1)))"), 42);
        assert_eq!(int("(try (/ 1 0) (e 7))"), 7);
        let (exit, _, _) = eval("(raise 3)");
        assert!(matches!(exit, Exit::Uncaught(v) if v.as_int() == 3));
    }

    #[test]
    fn floats_strings_and_prims() {
        let (_, v, _) = eval("(+. (float 1.5) (float 2.25))");
        assert_eq!(unsafe { v.double() }, 3.75);
        let (_, _, out) = eval("(seq (prim print_string \"hi\") (prim print_int 42))");
        assert_eq!(out, b"hi42");
        assert_eq!(int("(let (s \"abc\") (seq (sset s 1 122) (sget s 1)))"), 122);
        let (_, v, _) = eval("(let (a (floatarray (float 1.0) (float 2.0))) (seq (fset a 0 (float 4.5)) (fget a 0)))");
        assert_eq!(unsafe { v.double() }, 4.5);
        assert_eq!(int("(let (v (block 0 1 2 3)) (+ (vlen v) (vget v 2)))"), 6);
        assert_eq!(int("(method (block 0 (block 0 5 6)) 1)"), 6);
    }

    #[test]
    fn too_many_arguments() {
        let args = vec![Expr::Int(0); MAX_ARGS + 1];
        let f = Expr::Fun(vec![Ident { name: "x".into(), stamp: 1 }], Box::new(Expr::Int(0)));
        assert_eq!(
            compile_lambda(&Expr::Apply(Box::new(f), args)),
            Err(CompileError::TooManyArguments { count: MAX_ARGS + 1 })
        );
    }
}
