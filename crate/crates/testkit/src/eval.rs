//! Reference evaluator: a direct tree walk over the lambda AST with boxed
//! Rust values. It shares no code with the compiler or the VM beyond the
//! AST types, so agreement between the two is evidence for both.
//!
//! Evaluation order follows the bytecode compiler: operands and arguments
//! right to left, the function after its arguments, `for` bounds high then
//! low, `setfield` value before block, `method` object before index.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use zvm_core::bytecode::asm::escape_bytes;
use zvm_core::lambda::{Expr, Ident, PrimOp, RecBinding};
use zvm_core::observe::Outcome;

const MAX_DEPTH: usize = 6;
const MAX_FIELDS: usize = 16;

#[derive(Clone)]
pub enum V<'a> {
    Int(i64),
    Float(f64),
    Str(Rc<RefCell<Vec<u8>>>),
    Block(Rc<RefCell<Block<'a>>>),
    Floats(Rc<RefCell<Vec<f64>>>),
    Closure(Rc<Closure<'a>>),
}

pub struct Block<'a> {
    pub tag: u8,
    pub fields: Vec<V<'a>>,
}

pub struct Closure<'a> {
    params: &'a [Ident],
    body: &'a Expr,
    env: Rc<RefCell<Env<'a>>>,
    /// Arguments already supplied by partial application.
    applied: Vec<V<'a>>,
}

type Env<'a> = HashMap<Ident, V<'a>>;

/// Why evaluation stopped early.
pub enum Ctl<'a> {
    Raise(V<'a>),
    /// Something the machine would fault on, or that the evaluator does not
    /// model.
    Stuck(String),
    OutOfFuel,
}

type R<'a> = Result<V<'a>, Ctl<'a>>;

fn stuck<'a, T>(m: impl Into<String>) -> Result<T, Ctl<'a>> {
    Err(Ctl::Stuck(m.into()))
}

/// Two's-complement wrap to the 63-bit integer range.
pub fn wrap(n: i128) -> i64 {
    ((n as i64) << 1) >> 1
}

fn bool_v<'a>(b: bool) -> V<'a> {
    V::Int(b as i64)
}

fn exn<'a>(name: &str, msg: Option<&str>) -> V<'a> {
    let s = |b: &str| V::Str(Rc::new(RefCell::new(b.as_bytes().to_vec())));
    let mut fields = vec![s(name)];
    fields.extend(msg.map(s));
    V::Block(Rc::new(RefCell::new(Block { tag: 0, fields })))
}

fn div_by_zero<'a>() -> Ctl<'a> {
    Ctl::Raise(exn("Division_by_zero", None))
}

fn invalid_argument<'a>(msg: &str) -> Ctl<'a> {
    Ctl::Raise(exn("Invalid_argument", Some(msg)))
}

pub struct Evaluator<'a> {
    pub out: Vec<u8>,
    fuel: u64,
    /// String literals are shared constants in compiled code.
    literals: HashMap<*const Expr, V<'a>>,
}

/// Result of evaluating a whole program.
pub struct Observed {
    pub outcome: Result<Outcome, String>,
    pub output: Vec<u8>,
}

/// Evaluates a closed expression with a step budget.
pub fn evaluate(e: &Expr, fuel: u64) -> Observed {
    let mut ev = Evaluator { out: Vec::new(), fuel, literals: HashMap::new() };
    let env = Rc::new(RefCell::new(Env::new()));
    let outcome = match ev.eval(e, &env) {
        Ok(v) => Ok(Outcome::Value(render(&v))),
        Err(Ctl::Raise(v)) => Ok(Outcome::Exception(render(&v))),
        Err(Ctl::Stuck(m)) => Err(m),
        Err(Ctl::OutOfFuel) => Err("out of fuel".into()),
    };
    Observed { outcome, output: ev.out }
}

/// Same format as the machine-side renderer.
pub fn render(v: &V<'_>) -> String {
    let mut s = String::new();
    render_into(v, 0, &mut s);
    s
}

fn render_into(v: &V<'_>, depth: usize, s: &mut String) {
    match v {
        V::Int(n) => s.push_str(&format!("int {n}")),
        V::Float(d) => s.push_str(&format!("float {d:?}")),
        V::Str(b) => s.push_str(&format!("string {}", escape_bytes(&b.borrow()))),
        V::Closure(_) => s.push_str("closure"),
        V::Floats(a) => {
            let a = a.borrow();
            if a.is_empty() {
                s.push_str("block 0 []");
                return;
            }
            let items: Vec<String> = a.iter().take(MAX_FIELDS).map(|d| format!("{d:?}")).collect();
            s.push_str("floatarray [");
            s.push_str(&items.join("; "));
            if a.len() > MAX_FIELDS {
                s.push_str("; ...");
            }
            s.push(']');
        }
        V::Block(b) => {
            let b = b.borrow();
            s.push_str(&format!("block {} [", b.tag));
            if depth >= MAX_DEPTH && !b.fields.is_empty() {
                s.push_str("...");
            } else {
                for (i, f) in b.fields.iter().enumerate() {
                    if i > 0 {
                        s.push_str("; ");
                    }
                    if i == MAX_FIELDS {
                        s.push_str("...");
                        break;
                    }
                    render_into(f, depth + 1, s);
                }
            }
            s.push(']');
        }
    }
}

fn int<'a>(v: &V<'a>) -> Result<i64, Ctl<'a>> {
    match v {
        V::Int(n) => Ok(*n),
        _ => stuck("int expected"),
    }
}

fn float<'a>(v: &V<'a>) -> Result<f64, Ctl<'a>> {
    match v {
        V::Float(d) => Ok(*d),
        _ => stuck("float expected"),
    }
}

fn block<'a>(v: &V<'a>) -> Result<Rc<RefCell<Block<'a>>>, Ctl<'a>> {
    match v {
        V::Block(b) => Ok(b.clone()),
        _ => stuck("block expected"),
    }
}

fn string<'a>(v: &V<'a>) -> Result<Rc<RefCell<Vec<u8>>>, Ctl<'a>> {
    match v {
        V::Str(b) => Ok(b.clone()),
        _ => stuck("string expected"),
    }
}

fn shift(b: i64) -> u32 {
    (b & 63) as u32
}

fn int_binop<'a>(op: PrimOp, a: i64, b: i64) -> Result<i64, Ctl<'a>> {
    use PrimOp::*;
    Ok(match op {
        Add => wrap(a as i128 + b as i128),
        Sub => wrap(a as i128 - b as i128),
        Mul => wrap(a as i128 * b as i128),
        Div if b == 0 => return Err(div_by_zero()),
        Mod if b == 0 => return Err(div_by_zero()),
        Div => wrap(a as i128 / b as i128),
        Mod => wrap(a as i128 % b as i128),
        And => a & b,
        Or => a | b,
        Xor => a ^ b,
        Lsl => wrap((a as i128) << shift(b)),
        Lsr => wrap(((a as u64 & (u64::MAX >> 1)) >> shift(b)) as i128),
        Asr => a >> shift(b).min(63),
        Eq => (a == b) as i64,
        Neq => (a != b) as i64,
        Lt => (a < b) as i64,
        Le => (a <= b) as i64,
        Gt => (a > b) as i64,
        Ge => (a >= b) as i64,
        _ => return stuck(format!("{} is not an integer operator", op.name())),
    })
}

impl<'a> Evaluator<'a> {
    fn tick(&mut self) -> Result<(), Ctl<'a>> {
        if self.fuel == 0 {
            return Err(Ctl::OutOfFuel);
        }
        self.fuel -= 1;
        Ok(())
    }

    /// Right-to-left evaluation, results in source order.
    fn eval_all(&mut self, es: &'a [Expr], env: &Rc<RefCell<Env<'a>>>) -> Result<Vec<V<'a>>, Ctl<'a>> {
        let mut vs = Vec::with_capacity(es.len());
        for e in es.iter().rev() {
            vs.push(self.eval(e, env)?);
        }
        vs.reverse();
        Ok(vs)
    }

    fn bind(env: &Rc<RefCell<Env<'a>>>, x: &Ident, v: V<'a>) -> Rc<RefCell<Env<'a>>> {
        let mut e = env.borrow().clone();
        e.insert(x.clone(), v);
        Rc::new(RefCell::new(e))
    }

    pub fn eval(&mut self, e: &'a Expr, env: &Rc<RefCell<Env<'a>>>) -> R<'a> {
        self.tick()?;
        match e {
            Expr::Var(x) => env.borrow().get(x).cloned().map_or_else(|| stuck(format!("unbound {x}")), Ok),
            Expr::Int(n) => Ok(V::Int(*n)),
            Expr::Float(d) => Ok(V::Float(*d)),
            Expr::Str(s) => Ok(self
                .literals
                .entry(e as *const Expr)
                .or_insert_with(|| V::Str(Rc::new(RefCell::new(s.clone()))))
                .clone()),
            Expr::Let(x, init, body) => {
                let v = self.eval(init, env)?;
                self.eval(body, &Evaluator::bind(env, x, v))
            }
            Expr::LetRec(bs, body) => {
                let inner = Rc::new(RefCell::new(env.borrow().clone()));
                self.letrec(bs, &inner);
                self.eval(body, &inner)
            }
            Expr::Fun(ps, body) => Ok(V::Closure(Rc::new(Closure {
                params: ps,
                body,
                env: env.clone(),
                applied: Vec::new(),
            }))),
            Expr::Apply(f, args) => {
                let vs = self.eval_all(args, env)?;
                let fv = self.eval(f, env)?;
                self.apply(fv, vs)
            }
            Expr::Prim(op, args) => {
                let vs = self.eval_all(args, env)?;
                self.prim(*op, &vs)
            }
            Expr::CCall(name, args) => {
                let vs = self.eval_all(args, env)?;
                self.ccall(name, &vs)
            }
            Expr::If(c, t, f) => {
                if int(&self.eval(c, env)?)? != 0 {
                    self.eval(t, env)
                } else {
                    self.eval(f, env)
                }
            }
            Expr::Switch(s, ints, tags) => {
                let v = self.eval(s, env)?;
                let arm = match &v {
                    V::Int(n) => usize::try_from(*n).ok().and_then(|i| ints.get(i)),
                    V::Block(b) => tags.get(b.borrow().tag as usize),
                    _ => None,
                };
                match arm {
                    Some(a) => self.eval(a, env),
                    None => stuck("switch value outside its table"),
                }
            }
            Expr::Seq(es) => {
                let mut last = V::Int(0);
                for e in es {
                    last = self.eval(e, env)?;
                }
                Ok(last)
            }
            Expr::While(c, body) => {
                while int(&self.eval(c, env)?)? != 0 {
                    self.eval(body, env)?;
                }
                Ok(V::Int(0))
            }
            Expr::For(i, lo, hi, body) => {
                let hi = int(&self.eval(hi, env)?)?;
                let lo = int(&self.eval(lo, env)?)?;
                let mut k = lo;
                while k <= hi {
                    self.eval(body, &Evaluator::bind(env, i, V::Int(k)))?;
                    k = wrap(k as i128 + 1);
                    if k == lo {
                        break;
                    }
                }
                Ok(V::Int(0))
            }
            Expr::Raise(x) => {
                let v = self.eval(x, env)?;
                Err(Ctl::Raise(v))
            }
            Expr::TryWith(body, x, handler) => match self.eval(body, env) {
                Err(Ctl::Raise(v)) => self.eval(handler, &Evaluator::bind(env, x, v)),
                r => r,
            },
            Expr::MakeBlock(tag, es) => {
                let fields = self.eval_all(es, env)?;
                Ok(V::Block(Rc::new(RefCell::new(Block { tag: *tag, fields }))))
            }
            Expr::FloatArray(es) => {
                let vs = self.eval_all(es, env)?;
                let ds = vs.iter().map(float).collect::<Result<Vec<_>, _>>()?;
                if ds.is_empty() {
                    return Ok(V::Block(Rc::new(RefCell::new(Block { tag: 0, fields: vec![] }))));
                }
                Ok(V::Floats(Rc::new(RefCell::new(ds))))
            }
            Expr::Field(x, i) => {
                let b = block(&self.eval(x, env)?)?;
                let b = b.borrow();
                b.fields.get(*i).cloned().map_or_else(|| stuck("field out of bounds"), Ok)
            }
            Expr::SetField(x, i, v) => {
                let v = self.eval(v, env)?;
                let b = block(&self.eval(x, env)?)?;
                let mut b = b.borrow_mut();
                match b.fields.get_mut(*i) {
                    Some(f) => *f = v,
                    None => return stuck("field out of bounds"),
                }
                Ok(V::Int(0))
            }
            Expr::FloatField(x, i) => match self.eval(x, env)? {
                V::Floats(a) => a.borrow().get(*i).map_or_else(|| stuck("field out of bounds"), |d| Ok(V::Float(*d))),
                _ => stuck("float array expected"),
            },
            Expr::SetFloatField(x, i, v) => {
                let d = float(&self.eval(v, env)?)?;
                match self.eval(x, env)? {
                    V::Floats(a) => match a.borrow_mut().get_mut(*i) {
                        Some(f) => *f = d,
                        None => return stuck("field out of bounds"),
                    },
                    _ => return stuck("float array expected"),
                }
                Ok(V::Int(0))
            }
            Expr::Method(obj, idx) => {
                let o = block(&self.eval(obj, env)?)?;
                let i = int(&self.eval(idx, env)?)?;
                let table = o.borrow().fields.first().cloned().map_or_else(|| stuck("empty object"), Ok)?;
                let t = block(&table)?;
                let t = t.borrow();
                usize::try_from(i).ok().and_then(|i| t.fields.get(i).cloned()).map_or_else(|| stuck("no such method"), Ok)
            }
        }
    }

    fn letrec(&mut self, bs: &'a [RecBinding], env: &Rc<RefCell<Env<'a>>>) {
        for b in bs {
            let c = Closure {
                params: &b.params,
                body: &b.body,
                env: env.clone(),
                applied: Vec::new(),
            };
            env.borrow_mut().insert(b.name.clone(), V::Closure(Rc::new(c)));
        }
    }

    fn apply(&mut self, f: V<'a>, mut args: Vec<V<'a>>) -> R<'a> {
        self.tick()?;
        let V::Closure(c) = &f else {
            return stuck("apply of a non-closure");
        };
        let need = c.params.len() - c.applied.len();
        if args.len() < need {
            let mut applied = c.applied.clone();
            applied.extend(args);
            return Ok(V::Closure(Rc::new(Closure {
                params: c.params,
                body: c.body,
                env: c.env.clone(),
                applied,
            })));
        }
        let rest = args.split_off(need);
        let mut env = c.env.borrow().clone();
        for (p, v) in c.params.iter().zip(c.applied.iter().cloned().chain(args)) {
            env.insert(p.clone(), v);
        }
        let r = self.eval(c.body, &Rc::new(RefCell::new(env)))?;
        if rest.is_empty() {
            Ok(r)
        } else {
            self.apply(r, rest)
        }
    }

    fn prim(&mut self, op: PrimOp, vs: &[V<'a>]) -> R<'a> {
        use PrimOp::*;
        match op {
            // Boolean negation as 1 - n, so non-booleans follow the machine encoding.
            Not => Ok(V::Int(wrap(1 - int(&vs[0])? as i128))),
            Neg => Ok(V::Int(wrap(-(int(&vs[0])? as i128)))),
            IsInt => Ok(bool_v(matches!(vs[0], V::Int(_)))),
            VLen => match &vs[0] {
                V::Block(b) => Ok(V::Int(b.borrow().fields.len() as i64)),
                _ => stuck("vector expected"),
            },
            VGet => {
                let b = block(&vs[0])?;
                let i = int(&vs[1])?;
                let b = b.borrow();
                usize::try_from(i).ok().and_then(|i| b.fields.get(i).cloned()).ok_or_else(|| invalid_argument("index out of bounds"))
            }
            VSet => {
                let b = block(&vs[0])?;
                let i = int(&vs[1])?;
                let mut b = b.borrow_mut();
                let slot = usize::try_from(i).ok().and_then(|i| b.fields.get_mut(i)).ok_or_else(|| invalid_argument("index out of bounds"))?;
                *slot = vs[2].clone();
                Ok(V::Int(0))
            }
            SGet => {
                let s = string(&vs[0])?;
                let i = int(&vs[1])?;
                let s = s.borrow();
                usize::try_from(i).ok().and_then(|i| s.get(i)).map(|c| V::Int(*c as i64)).ok_or_else(|| invalid_argument("index out of bounds"))
            }
            SSet => {
                let s = string(&vs[0])?;
                let i = int(&vs[1])?;
                let c = int(&vs[2])?;
                let mut s = s.borrow_mut();
                let slot = usize::try_from(i).ok().and_then(|i| s.get_mut(i)).ok_or_else(|| invalid_argument("index out of bounds"))?;
                *slot = c as u8;
                Ok(V::Int(0))
            }
            FAdd | FSub | FMul | FDiv => {
                let (a, b) = (float(&vs[0])?, float(&vs[1])?);
                Ok(V::Float(match op {
                    FAdd => a + b,
                    FSub => a - b,
                    FMul => a * b,
                    _ => a / b,
                }))
            }
            FEq => Ok(bool_v(float(&vs[0])? == float(&vs[1])?)),
            FLt => Ok(bool_v(float(&vs[0])? < float(&vs[1])?)),
            FLe => Ok(bool_v(float(&vs[0])? <= float(&vs[1])?)),
            _ => Ok(V::Int(int_binop(op, int(&vs[0])?, int(&vs[1])?)?)),
        }
    }

    fn ccall(&mut self, name: &str, vs: &[V<'a>]) -> R<'a> {
        let unit = Ok(V::Int(0));
        match name {
            "print_int" => {
                let n = int(&vs[0])?;
                self.out.extend_from_slice(n.to_string().as_bytes());
                unit
            }
            "print_string" => {
                let s = string(&vs[0])?;
                self.out.extend_from_slice(&s.borrow());
                unit
            }
            "print_newline" => {
                self.out.push(b'\n');
                unit
            }
            "string_length" => Ok(V::Int(string(&vs[0])?.borrow().len() as i64)),
            "string_get" => self.prim(PrimOp::SGet, vs),
            "string_set" => self.prim(PrimOp::SSet, vs),
            "array_make" => {
                let n = int(&vs[0])?;
                if n < 0 {
                    return Err(invalid_argument("Array.make"));
                }
                let fields = vec![vs[1].clone(); n as usize];
                Ok(V::Block(Rc::new(RefCell::new(Block { tag: 0, fields }))))
            }
            "caml_float_of_int" => Ok(V::Float(int(&vs[0])? as f64)),
            "caml_int_of_float" => Ok(V::Int(wrap(float(&vs[0])? as i64 as i128))),
            "caml_sqrt_float" => Ok(V::Float(float(&vs[0])?.sqrt())),
            "caml_neg_float" => Ok(V::Float(-float(&vs[0])?)),
            "caml_add_float" => self.prim(PrimOp::FAdd, vs),
            "caml_sub_float" => self.prim(PrimOp::FSub, vs),
            "caml_mul_float" => self.prim(PrimOp::FMul, vs),
            "caml_div_float" => self.prim(PrimOp::FDiv, vs),
            "caml_eq_float" => self.prim(PrimOp::FEq, vs),
            "caml_lt_float" => self.prim(PrimOp::FLt, vs),
            "caml_le_float" => self.prim(PrimOp::FLe, vs),
            _ => stuck(format!("primitive {name} not modeled")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use zvm_core::lambda::parse_lambda;

    fn run(src: &str) -> Observed {
        evaluate(&parse_lambda(src).unwrap(), 1_000_000)
    }

    fn value(src: &str) -> String {
        match run(src).outcome {
            Ok(Outcome::Value(v)) => v,
            other => panic!("{src}: {other:?}"),
        }
    }

    #[test]
    fn basics() {
        assert_eq!(value("(let (x 1) (+ x 3))"), "int 4");
        assert_eq!(value("(letrec ((f (fun (n) (if (< n 2) n (+ (f (- n 1)) (f (- n 2))))))) (f 10))"), "int 55");
        assert_eq!(value("(let (f (fun (a b) (- a b))) ((f 10) 4))"), "int 6");
        assert_eq!(value("(block 2 1 (block 0))"), "block 2 [int 1; block 0 []]");
    }

    #[test]
    fn arithmetic_wraps_at_63_bits() {
        assert_eq!(value("(+ 4611686018427387903 1)"), "int -4611686018427387904");
        assert_eq!(value("(lsr -1 1)"), "int 4611686018427387903");
        assert_eq!(value("(asr -1000 3)"), "int -125");
        assert_eq!(value("(lsl 1 64)"), "int 1");
    }

    #[test]
    fn right_to_left_order_shows_in_output() {
        let o = run("(+ (seq (prim print_int 1) 1) (seq (prim print_int 2) 2))");
        assert_eq!(o.output, b"21");
    }

    #[test]
    fn exceptions() {
        let o = run("(/ 1 0)");
        assert_eq!(o.outcome, Ok(Outcome::Exception("block 0 [string \"Division_by_zero\"]".into())));
        assert_eq!(value("(try (raise (block 1 5)) (e (field e 0)))"), "int 5");
    }
}
