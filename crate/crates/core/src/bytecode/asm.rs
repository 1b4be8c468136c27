//! Textual `.zasm` format.
//!
//! ```text
//! .prim print_int          ; primitive table entry
//! .global 10               ; int global (also `.global unit`)
//! .string "hi\n"           ; string global
//!     CONSTINT 1
//! loop:
//!     BRANCHIFNOT done
//!     BRANCH loop
//! done: STOP
//! ```
//!
//! Offset operands accept either a label or a raw relative offset.

use super::{decode, encode, Arity, DecodeError, EncodeError, GlobalInit, Instr, Opcode, Operand, Segment};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: {source}")]
    Encode { line: usize, source: EncodeError },
}

enum Arg {
    Num(i64),
    Label(String),
}

struct Pending {
    line: usize,
    op: Opcode,
    args: Vec<Arg>,
    at: usize,
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

fn is_label(s: &str) -> bool {
    let mut c = s.chars();
    c.next().is_some_and(|h| h.is_ascii_alphabetic() || h == '_' || h == '.')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.')
}

fn parse_num(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(h) => i64::from_str_radix(h, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { -v } else { v })
}

fn strip_comment(l: &str) -> &str {
    let mut in_str = false;
    let mut esc = false;
    for (i, c) in l.char_indices() {
        match c {
            _ if esc => esc = false,
            '\\' if in_str => esc = true,
            '"' => in_str = !in_str,
            ';' if !in_str => return &l[..i],
            _ => {}
        }
    }
    l
}

pub fn parse_string_literal(s: &str) -> Option<Vec<u8>> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            'n' => out.push(b'\n'),
            't' => out.push(b'\t'),
            'r' => out.push(b'\r'),
            '0' => out.push(0),
            '\\' => out.push(b'\\'),
            '"' => out.push(b'"'),
            'x' => {
                let h: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&h, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

pub fn escape_bytes(b: &[u8]) -> String {
    let mut s = String::from("\"");
    for &c in b {
        match c {
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\\' => s.push_str("\\\\"),
            b'"' => s.push_str("\\\""),
            0x20..=0x7e => s.push(c as char),
            _ => {
                let _ = write!(s, "\\x{c:02x}");
            }
        }
    }
    s.push('"');
    s
}

pub fn assemble(text: &str) -> Result<Segment, AsmError> {
    let mut seg = Segment::default();
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut at = 0usize;
    let mut last_op = None;

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut rest = strip_comment(raw).trim();
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if !is_label(name) || rest.starts_with('.') {
                break;
            }
            if labels.insert(name.to_string(), at).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: name.to_string() });
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        if let Some(d) = rest.strip_prefix('.') {
            let (dir, arg) = d.split_once(char::is_whitespace).unwrap_or((d, ""));
            let arg = arg.trim();
            match dir {
                "prim" if is_label(arg) => seg.prims.push(arg.to_string()),
                "global" if arg == "unit" => seg.globals.push(GlobalInit::Unit),
                "global" => {
                    let v = parse_num(arg).ok_or_else(|| syntax(line, format!("bad global `{arg}`")))?;
                    seg.globals.push(GlobalInit::Int(v));
                }
                "string" => {
                    let b = parse_string_literal(arg).ok_or_else(|| syntax(line, "bad string literal"))?;
                    seg.globals.push(GlobalInit::Str(b));
                }
                _ => return Err(syntax(line, format!("unknown directive `.{d}`"))),
            }
            continue;
        }
        let mut toks = rest.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty());
        let mn = toks.next().expect("non-empty line");
        let op = Opcode::from_mnemonic(mn).ok_or_else(|| syntax(line, format!("unknown mnemonic `{mn}`")))?;
        let mut args = Vec::new();
        for t in toks {
            if let Some(v) = parse_num(t) {
                args.push(Arg::Num(v));
            } else if is_label(t) {
                args.push(Arg::Label(t.to_string()));
            } else {
                return Err(syntax(line, format!("bad operand `{t}`")));
            }
        }
        let len = match op.arity() {
            Arity::Fixed(k) => 1 + k.len(),
            Arity::ClosureRec => 1 + args.len(),
            Arity::Switch => args.len().max(1),
        };
        pending.push(Pending { line, op, args, at });
        at += len;
        last_op = Some(op);
    }
    if last_op != Some(Opcode::Stop) {
        pending.push(Pending { line: 0, op: Opcode::Stop, args: vec![], at });
    }

    for p in pending {
        let kinds = operand_bases(p.op, p.args.len());
        let mut args = Vec::with_capacity(p.args.len());
        for (i, a) in p.args.iter().enumerate() {
            let v = match a {
                Arg::Num(v) => *v,
                Arg::Label(l) => {
                    let base = kinds.get(i).copied().flatten().ok_or_else(|| {
                        syntax(p.line, format!("label `{l}` used where an immediate is expected"))
                    })?;
                    let target = *labels
                        .get(l)
                        .ok_or_else(|| AsmError::UndefinedLabel { line: p.line, label: l.clone() })?;
                    target as i64 - (p.at + base) as i64
                }
            };
            args.push(v);
        }
        let w = encode(&Instr { op: p.op, args }).map_err(|source| AsmError::Encode { line: p.line, source })?;
        seg.words.extend(w);
    }
    Ok(seg)
}

/// For each source operand, the base its offset is measured from (relative
/// to the instruction start), or `None` for immediates.
fn operand_bases(op: Opcode, nargs: usize) -> Vec<Option<usize>> {
    match op.arity() {
        Arity::Fixed(kinds) => kinds
            .iter()
            .enumerate()
            .map(|(j, k)| (*k == Operand::Offset).then_some(j + 1))
            .collect(),
        Arity::ClosureRec => (0..nargs).map(|j| (j >= 2).then_some(3)).collect(),
        Arity::Switch => (0..nargs).map(|j| (j >= 2).then_some(2)).collect(),
    }
}

/// Renders a segment as assembly that re-assembles to identical words.
pub fn disassemble(s: &Segment) -> Result<String, DecodeError> {
    let instrs = s.instructions()?;
    let starts: BTreeSet<usize> = instrs.iter().map(|(at, _)| *at).collect();
    let on_start = |t: i64| (t >= 0 && starts.contains(&(t as usize))).then_some(t as usize);
    let labelled: BTreeSet<usize> = instrs
        .iter()
        .flat_map(|(at, i)| i.targets(*at))
        .filter_map(on_start)
        .collect();

    let mut out = String::new();
    for p in &s.prims {
        let _ = writeln!(out, ".prim {p}");
    }
    for g in &s.globals {
        let _ = match g {
            GlobalInit::Int(v) => writeln!(out, ".global {v}"),
            GlobalInit::Unit => writeln!(out, ".global unit"),
            GlobalInit::Str(b) => writeln!(out, ".string {}", escape_bytes(b)),
        };
    }
    for (at, i) in &instrs {
        if labelled.contains(at) {
            let _ = writeln!(out, "L{at}:");
        }
        let slots = i.offset_slots();
        let _ = write!(out, "    {}", i.op.mnemonic());
        for (j, a) in i.args.iter().enumerate() {
            let word = if i.op == Opcode::Switch { j } else { j + 1 };
            let label = slots
                .iter()
                .find(|(w, _)| *w == word)
                .and_then(|(_, base)| on_start(*at as i64 + *base as i64 + a));
            let _ = match label {
                Some(t) => write!(out, " L{t}"),
                None => write!(out, " {a}"),
            };
        }
        out.push('\n');
    }
    Ok(out)
}

/// Decodes one instruction for display, e.g. in JIT dumps.
pub fn render_at(words: &[i32], at: usize) -> String {
    match decode(words, at) {
        Ok((i, _)) => i.to_string(),
        Err(e) => e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG4: &str = "CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3";

    #[test]
    fn fig4_words() {
        let s = assemble(FIG4).unwrap();
        use Opcode::*;
        assert_eq!(
            s.words,
            vec![ConstInt as i32, 1, Push as i32, Acc as i32, 0, OffsetInt as i32, 3, Stop as i32]
        );
        let text = disassemble(&s).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn branch_offset_is_relative_to_operand_word() {
        let s = assemble("BRANCH L\nL: STOP").unwrap();
        assert_eq!(s.words, vec![Opcode::Branch as i32, 1, Opcode::Stop as i32]);
        let (i, _) = decode(&s.words, 0).unwrap();
        assert_eq!(i.args, vec![1]);
    }

    #[test]
    fn label_errors() {
        assert!(matches!(assemble("BRANCH nowhere"), Err(AsmError::UndefinedLabel { line: 1, .. })));
        assert!(matches!(assemble("a: PUSH\na: STOP"), Err(AsmError::DuplicateLabel { line: 2, .. })));
        assert!(matches!(assemble("PUSH\nFROB 3"), Err(AsmError::Syntax { line: 2, .. })));
        assert!(matches!(assemble("CONSTINT x"), Err(AsmError::Syntax { line: 1, .. })));
    }

    #[test]
    fn stop_is_not_duplicated() {
        let s = assemble("const 2\nstop").unwrap();
        assert_eq!(s.words, vec![Opcode::ConstInt as i32, 2, Opcode::Stop as i32]);
    }

    #[test]
    fn tables_and_directives_round_trip() {
        let src = r#"
.prim print_int
.global 7
.global unit
.string "a\"b\n\xff"
    CONSTINT 1
    SWITCH 2 1 a b c
a:  CLOSUREREC 2 0 f g
    BRANCH c
b:  PUSHTRAP c
f:  RETURN 1
g:  BEQ 3 a
c:  STOP
"#;
        let s = assemble(src).unwrap();
        assert_eq!(s.prims, vec!["print_int"]);
        assert_eq!(
            s.globals,
            vec![GlobalInit::Int(7), GlobalInit::Unit, GlobalInit::Str(b"a\"b\n\xff".to_vec())]
        );
        let text = disassemble(&s).unwrap();
        assert_eq!(assemble(&text).unwrap(), s);
    }

    #[test]
    fn table_offsets_share_one_base() {
        let s = assemble("CLOSUREREC 2 0 f g\nf: STOP\ng: STOP").unwrap();
        assert_eq!(&s.words[3..5], &[2, 3]);
        let s = assemble("SWITCH 1 1 a b\na: STOP\nb: STOP").unwrap();
        assert_eq!(&s.words[2..4], &[2, 3]);
    }

    #[test]
    fn mutated_words_do_not_disassemble() {
        let mut s = assemble(FIG4).unwrap();
        s.words[0] = -40;
        assert!(disassemble(&s).is_err());
    }
}
