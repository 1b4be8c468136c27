use super::{Expr, Ident, PrimOp, RecBinding};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unbound variable `{name}`")]
    UnboundVariable { line: usize, name: String },
}

#[derive(Debug)]
enum Sexp {
    Atom(String, usize),
    Str(Vec<u8>, usize),
    List(Vec<Sexp>, usize),
}

impl Sexp {
    fn line(&self) -> usize {
        match self {
            Sexp::Atom(_, l) | Sexp::Str(_, l) | Sexp::List(_, l) => *l,
        }
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, msg: msg.into() }
}

fn read_all(src: &str) -> Result<Vec<Sexp>, ParseError> {
    let bytes = src.as_bytes();
    let mut i = 0;
    let mut line = 1;
    let mut stack: Vec<(Vec<Sexp>, usize)> = vec![(Vec::new(), 1)];
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                line += 1;
                i += 1;
            }
            _ if c.is_ascii_whitespace() => i += 1,
            b';' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' => {
                stack.push((Vec::new(), line));
                i += 1;
            }
            b')' => {
                let (items, l) = stack.pop().filter(|_| !stack.is_empty()).ok_or_else(|| syntax(line, "unbalanced `)`"))?;
                stack.last_mut().expect("outer list").0.push(Sexp::List(items, l));
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut esc = false;
                while i < bytes.len() && (esc || bytes[i] != b'"') {
                    esc = !esc && bytes[i] == b'\\';
                    if bytes[i] == b'\n' {
                        line += 1;
                    }
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(syntax(line, "unterminated string"));
                }
                i += 1;
                let lit = crate::bytecode::asm::parse_string_literal(&src[start..i])
                    .ok_or_else(|| syntax(line, "bad escape in string"))?;
                stack.last_mut().expect("list").0.push(Sexp::Str(lit, line));
            }
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && !b"();\"".contains(&bytes[i]) {
                    i += 1;
                }
                stack.last_mut().expect("list").0.push(Sexp::Atom(src[start..i].to_string(), line));
            }
        }
    }
    if stack.len() != 1 {
        return Err(syntax(line, "unbalanced `(`"));
    }
    Ok(stack.pop().expect("top").0)
}

const KEYWORDS: &[&str] = &[
    "let", "letrec", "fun", "if", "switch", "seq", "while", "for", "raise", "try", "block", "field",
    "setfield", "floatarray", "fget", "fset", "method", "float", "prim", "ints", "tags",
];

struct Resolver {
    scopes: HashMap<String, Vec<u32>>,
    next: u32,
}

impl Resolver {
    fn bind(&mut self, s: &Sexp) -> Result<Ident, ParseError> {
        let Sexp::Atom(name, line) = s else {
            return Err(syntax(s.line(), "expected a variable name"));
        };
        let valid = !KEYWORDS.contains(&name.as_str())
            && PrimOp::from_name(name).is_none()
            && name.parse::<i64>().is_err()
            && !name.starts_with(|c: char| c.is_ascii_digit());
        if !valid {
            return Err(syntax(*line, format!("`{name}` cannot be bound")));
        }
        self.next += 1;
        self.scopes.entry(name.clone()).or_default().push(self.next);
        Ok(Ident { name: name.clone(), stamp: self.next })
    }

    fn unbind(&mut self, id: &Ident) {
        self.scopes.get_mut(&id.name).and_then(|v| v.pop());
    }

    fn lookup(&self, name: &str, line: usize) -> Result<Ident, ParseError> {
        match self.scopes.get(name).and_then(|v| v.last()) {
            Some(&stamp) => Ok(Ident { name: name.to_string(), stamp }),
            None => Err(ParseError::UnboundVariable { line, name: name.to_string() }),
        }
    }

    fn expr(&mut self, s: &Sexp) -> Result<Expr, ParseError> {
        match s {
            Sexp::Str(b, _) => Ok(Expr::Str(b.clone())),
            Sexp::Atom(a, line) => {
                if let Ok(n) = a.parse::<i64>() {
                    if n <= -crate::value::INT_LIMIT || n >= crate::value::INT_LIMIT {
                        return Err(syntax(*line, format!("integer {n} out of range")));
                    }
                    return Ok(Expr::Int(n));
                }
                if KEYWORDS.contains(&a.as_str()) || PrimOp::from_name(a).is_some() {
                    return Err(syntax(*line, format!("`{a}` is not a value")));
                }
                Ok(Expr::Var(self.lookup(a, *line)?))
            }
            Sexp::List(items, line) => self.form(items, *line),
        }
    }

    fn exprs(&mut self, items: &[Sexp]) -> Result<Vec<Expr>, ParseError> {
        items.iter().map(|s| self.expr(s)).collect()
    }

    fn boxed(&mut self, s: &Sexp) -> Result<Box<Expr>, ParseError> {
        Ok(Box::new(self.expr(s)?))
    }

    fn index(s: &Sexp) -> Result<usize, ParseError> {
        match s {
            Sexp::Atom(a, _) => a.parse::<usize>().map_err(|_| syntax(s.line(), "expected a field index")),
            _ => Err(syntax(s.line(), "expected a field index")),
        }
    }

    fn params(&mut self, s: &Sexp) -> Result<Vec<Ident>, ParseError> {
        let Sexp::List(ps, line) = s else {
            return Err(syntax(s.line(), "expected a parameter list"));
        };
        if ps.is_empty() {
            return Err(syntax(*line, "functions take at least one parameter"));
        }
        ps.iter().map(|p| self.bind(p)).collect()
    }

    fn fun(&mut self, s: &Sexp) -> Result<(Vec<Ident>, Expr), ParseError> {
        let ok = matches!(s, Sexp::List(it, _) if it.len() == 3 && matches!(&it[0], Sexp::Atom(k, _) if k == "fun"));
        if !ok {
            return Err(syntax(s.line(), "expected (fun (params) body)"));
        }
        let Sexp::List(it, _) = s else { unreachable!() };
        let ps = self.params(&it[1])?;
        let body = self.expr(&it[2])?;
        for p in ps.iter().rev() {
            self.unbind(p);
        }
        Ok((ps, body))
    }

    fn form(&mut self, items: &[Sexp], line: usize) -> Result<Expr, ParseError> {
        let Some(head) = items.first() else {
            return Err(syntax(line, "empty form"));
        };
        let args = &items[1..];
        let arity = |n: usize| -> Result<(), ParseError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(syntax(line, format!("form takes {n} arguments, got {}", args.len())))
            }
        };
        let kw = match head {
            Sexp::Atom(a, _) => a.as_str(),
            _ => "",
        };
        if let Some((op, n)) = PrimOp::from_name(kw) {
            arity(n)?;
            return Ok(Expr::Prim(op, self.exprs(args)?));
        }
        match kw {
            "let" => {
                arity(2)?;
                let Sexp::List(b, bl) = &args[0] else {
                    return Err(syntax(line, "expected (let (x e) body)"));
                };
                if b.len() != 2 {
                    return Err(syntax(*bl, "expected a single (x e) binding"));
                }
                let e = self.expr(&b[1])?;
                let x = self.bind(&b[0])?;
                let body = self.expr(&args[1])?;
                self.unbind(&x);
                Ok(Expr::Let(x, Box::new(e), Box::new(body)))
            }
            "letrec" => {
                arity(2)?;
                let Sexp::List(bs, bl) = &args[0] else {
                    return Err(syntax(line, "expected a binding list"));
                };
                if bs.is_empty() {
                    return Err(syntax(*bl, "letrec needs at least one binding"));
                }
                let mut names = Vec::new();
                for b in bs {
                    match b {
                        Sexp::List(p, _) if p.len() == 2 => names.push(self.bind(&p[0])?),
                        _ => return Err(syntax(b.line(), "expected (f (fun ...))")),
                    }
                }
                let mut out = Vec::new();
                for (b, name) in bs.iter().zip(&names) {
                    let Sexp::List(p, _) = b else { unreachable!() };
                    let (params, body) = self.fun(&p[1])?;
                    out.push(RecBinding { name: name.clone(), params, body });
                }
                let body = self.expr(&args[1])?;
                for n in names.iter().rev() {
                    self.unbind(n);
                }
                Ok(Expr::LetRec(out, Box::new(body)))
            }
            "fun" => {
                let (ps, body) = self.fun(&Sexp::List(
                    items.iter().map(clone_sexp).collect(),
                    line,
                ))?;
                Ok(Expr::Fun(ps, Box::new(body)))
            }
            "if" => match args.len() {
                2 => Ok(Expr::If(self.boxed(&args[0])?, self.boxed(&args[1])?, Box::new(Expr::Int(0)))),
                3 => Ok(Expr::If(self.boxed(&args[0])?, self.boxed(&args[1])?, self.boxed(&args[2])?)),
                _ => Err(syntax(line, "expected (if c t e)")),
            },
            "switch" => {
                if args.is_empty() || args.len() > 3 {
                    return Err(syntax(line, "expected (switch e (ints ...) (tags ...))"));
                }
                let scrut = self.boxed(&args[0])?;
                let (mut ints, mut tags) = (Vec::new(), Vec::new());
                for part in &args[1..] {
                    match part {
                        Sexp::List(p, _) if matches!(p.first(), Some(Sexp::Atom(k, _)) if k == "ints") => {
                            ints = self.exprs(&p[1..])?
                        }
                        Sexp::List(p, _) if matches!(p.first(), Some(Sexp::Atom(k, _)) if k == "tags") => {
                            tags = self.exprs(&p[1..])?
                        }
                        _ => return Err(syntax(part.line(), "expected (ints ...) or (tags ...)")),
                    }
                }
                if ints.len() > 0xFFFF || tags.len() > 256 {
                    return Err(syntax(line, "switch table too large"));
                }
                Ok(Expr::Switch(scrut, ints, tags))
            }
            "seq" => {
                if args.is_empty() {
                    return Err(syntax(line, "empty seq"));
                }
                Ok(Expr::Seq(self.exprs(args)?))
            }
            "while" => {
                arity(2)?;
                Ok(Expr::While(self.boxed(&args[0])?, self.boxed(&args[1])?))
            }
            "for" => {
                arity(4)?;
                let lo = self.boxed(&args[1])?;
                let hi = self.boxed(&args[2])?;
                let i = self.bind(&args[0])?;
                let body = self.boxed(&args[3])?;
                self.unbind(&i);
                Ok(Expr::For(i, lo, hi, body))
            }
            "raise" => {
                arity(1)?;
                Ok(Expr::Raise(self.boxed(&args[0])?))
            }
            "try" => {
                arity(2)?;
                let body = self.boxed(&args[0])?;
                let Sexp::List(h, hl) = &args[1] else {
                    return Err(syntax(line, "expected (try body (x handler))"));
                };
                if h.len() != 2 {
                    return Err(syntax(*hl, "expected (x handler)"));
                }
                let x = self.bind(&h[0])?;
                let handler = self.boxed(&h[1])?;
                self.unbind(&x);
                Ok(Expr::TryWith(body, x, handler))
            }
            "block" => {
                let tag = args.first().ok_or_else(|| syntax(line, "block needs a tag"))?;
                let tag = Resolver::index(tag)?;
                if tag > 245 {
                    return Err(syntax(line, "block tag must be below 246"));
                }
                Ok(Expr::MakeBlock(tag as u8, self.exprs(&args[1..])?))
            }
            "field" | "fget" => {
                arity(2)?;
                let e = self.boxed(&args[0])?;
                let i = Resolver::index(&args[1])?;
                Ok(if kw == "field" { Expr::Field(e, i) } else { Expr::FloatField(e, i) })
            }
            "setfield" | "fset" => {
                arity(3)?;
                let e = self.boxed(&args[0])?;
                let i = Resolver::index(&args[1])?;
                let v = self.boxed(&args[2])?;
                Ok(if kw == "setfield" { Expr::SetField(e, i, v) } else { Expr::SetFloatField(e, i, v) })
            }
            "floatarray" => Ok(Expr::FloatArray(self.exprs(args)?)),
            "method" => {
                arity(2)?;
                Ok(Expr::Method(self.boxed(&args[0])?, self.boxed(&args[1])?))
            }
            "float" => {
                arity(1)?;
                match &args[0] {
                    Sexp::Atom(a, l) => a
                        .parse::<f64>()
                        .map(Expr::Float)
                        .map_err(|_| syntax(*l, format!("bad float literal `{a}`"))),
                    other => Err(syntax(other.line(), "expected a float literal")),
                }
            }
            "prim" => {
                let Some(Sexp::Atom(name, _)) = args.first() else {
                    return Err(syntax(line, "expected (prim name args...)"));
                };
                let rest = self.exprs(&args[1..])?;
                if rest.is_empty() || rest.len() > crate::prims::MAX_PRIM_ARITY {
                    return Err(syntax(line, "primitives take 1 to 5 arguments"));
                }
                Ok(Expr::CCall(name.clone(), rest))
            }
            "ints" | "tags" => Err(syntax(line, format!("`{kw}` outside switch"))),
            _ => {
                if args.is_empty() {
                    return Err(syntax(line, "application needs at least one argument"));
                }
                Ok(Expr::Apply(self.boxed(head)?, self.exprs(args)?))
            }
        }
    }
}

fn clone_sexp(s: &Sexp) -> Sexp {
    match s {
        Sexp::Atom(a, l) => Sexp::Atom(a.clone(), *l),
        Sexp::Str(b, l) => Sexp::Str(b.clone(), *l),
        Sexp::List(v, l) => Sexp::List(v.iter().map(clone_sexp).collect(), *l),
    }
}

/// Parses one expression, resolving every variable to its binding.
pub fn parse_lambda(src: &str) -> Result<Expr, ParseError> {
    let top = read_all(src)?;
    match top.as_slice() {
        [one] => Resolver { scopes: HashMap::new(), next: 0 }.expr(one),
        [] => Err(syntax(1, "empty program")),
        [_, second, ..] => Err(syntax(second.line(), "more than one top-level expression")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(name: &str, stamp: u32) -> Ident {
        Ident { name: name.into(), stamp }
    }

    #[test]
    fn fig3_shape() {
        let e = parse_lambda("(let (x 1) (+ x 3))").unwrap();
        assert_eq!(
            e,
            Expr::Let(
                id("x", 1),
                Box::new(Expr::Int(1)),
                Box::new(Expr::Prim(PrimOp::Add, vec![Expr::Var(id("x", 1)), Expr::Int(3)]))
            )
        );
        assert_eq!(e.to_string(), "(let (x/1 1) (+ x/1 3))");
    }

    #[test]
    fn prim_node() {
        assert_eq!(parse_lambda("(+ 1 2)").unwrap(), Expr::Prim(PrimOp::Add, vec![Expr::Int(1), Expr::Int(2)]));
    }

    #[test]
    fn unbound_variable() {
        assert_eq!(
            parse_lambda("(f y)"),
            Err(ParseError::UnboundVariable { line: 1, name: "f".into() })
        );
    }

    #[test]
    fn shadowing_gets_distinct_stamps() {
        let e = parse_lambda("(let (x 1) (let (x x) x))").unwrap();
        let Expr::Let(a, _, body) = e else { panic!() };
        let Expr::Let(b, init, inner) = *body else { panic!() };
        assert_ne!(a, b);
        assert_eq!(*init, Expr::Var(a));
        assert_eq!(*inner, Expr::Var(b));
    }

    #[test]
    fn letrec_names_scope_over_bodies() {
        let e = parse_lambda("(letrec ((f (fun (n) (g n))) (g (fun (m) (f m)))) (f 1))").unwrap();
        assert!(matches!(e, Expr::LetRec(ref bs, _) if bs.len() == 2));
        assert!(parse_lambda("(seq (letrec ((f (fun (n) n))) 0) (f 1))").is_err());
    }

    #[test]
    fn syntax_errors_carry_lines() {
        assert!(matches!(parse_lambda("(let (x 1)\n (+ x"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_lambda("1 2"), Err(ParseError::Syntax { line: 1, .. })));
        assert!(matches!(parse_lambda("\n(fun () 1)"), Err(ParseError::Syntax { line: 2, .. })));
        assert!(matches!(parse_lambda("(let (let 1) 2)"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn strings_floats_and_comments() {
        let e = parse_lambda("; comment\n(seq \"a\\n\" (float 1.5))").unwrap();
        assert_eq!(e, Expr::Seq(vec![Expr::Str(b"a\n".to_vec()), Expr::Float(1.5)]));
    }
}
