//! Static well-formedness checks run before execution.

use super::{decode, Instr, Opcode, Segment};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub at: usize,
    pub msg: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "word {}: {}", self.at, self.msg)
    }
}

pub fn validate(s: &Segment) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut report = |at: usize, msg: String| diags.push(Diagnostic { at, msg });

    let mut instrs: Vec<(usize, Instr)> = Vec::new();
    let mut at = 0;
    while at < s.words.len() {
        match decode(&s.words, at) {
            Ok((i, next)) => {
                instrs.push((at, i));
                at = next;
            }
            Err(e) => {
                report(at, e.to_string());
                return diags;
            }
        }
    }
    match instrs.last() {
        Some((_, i)) if i.op == Opcode::Stop => {}
        Some((at, _)) => report(*at, "segment does not end with STOP".into()),
        None => report(0, "empty segment".into()),
    }

    let starts: BTreeSet<usize> = instrs.iter().map(|(a, _)| *a).collect();
    let opcode_at = |a: usize| -> Option<Opcode> { starts.contains(&a).then(|| Opcode::from_word(s.words[a])).flatten() };

    for (at, i) in &instrs {
        let at = *at;
        for t in i.targets(at) {
            if t < 0 || !starts.contains(&(t as usize)) {
                report(at, format!("{}: target {t} is not an instruction start", i.op));
            }
        }
        let a = &i.args;
        let nonneg = |k: usize| a[k] >= 0;
        let bad = match i.op {
            Opcode::Acc
            | Opcode::PushAcc
            | Opcode::Pop
            | Opcode::Assign
            | Opcode::EnvAcc
            | Opcode::Return
            | Opcode::Grab
            | Opcode::MakeFloatBlock
            | Opcode::GetField
            | Opcode::SetField
            | Opcode::GetFloatField
            | Opcode::SetFloatField
            | Opcode::Closure => (!nonneg(0)).then_some("negative operand"),
            Opcode::Atom => (!(0..256).contains(&a[0])).then_some("atom tag out of range"),
            Opcode::Apply => (a[0] < 1).then_some("APPLY needs at least one argument"),
            Opcode::AppTerm => (a[0] < 1 || a[1] < a[0]).then_some("APPTERM needs 1 <= args <= frame size"),
            Opcode::MakeBlock => {
                (!(0..256).contains(&a[0]) || a[1] < 0).then_some("MAKEBLOCK tag or size out of range")
            }
            Opcode::ClosureRec => (a[0] < 1 || a[1] < 0).then_some("CLOSUREREC counts out of range"),
            Opcode::CCall => {
                if a[0] < 0 || a[0] as usize >= s.prims.len() {
                    report(at, format!("C_CALL primitive index {} out of range (have {})", a[0], s.prims.len()));
                }
                (!(1..=5).contains(&a[1])).then_some("C_CALL arity must be 1..5")
            }
            Opcode::GetGlobal | Opcode::SetGlobal | Opcode::GetGlobalField => {
                (a[0] < 0 || a[0] as usize >= s.globals.len()).then_some("global index out of range")
            }
            _ => None,
        };
        if let Some(msg) = bad {
            report(at, format!("{i}: {msg}"));
        }
        if i.op == Opcode::Grab && (at == 0 || opcode_at(at - 1) != Some(Opcode::Restart)) {
            report(at, "GRAB must be preceded by RESTART".into());
        }
        if i.op == Opcode::GetGlobalField && a[1] < 0 {
            report(at, format!("{i}: negative field index"));
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;

    #[test]
    fn fig4_is_clean() {
        let s = assemble("CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3").unwrap();
        assert!(validate(&s).is_empty());
    }

    #[test]
    fn branch_into_operand() {
        let s = assemble("BRANCH 2\nCONSTINT 5\nSTOP").unwrap();
        let d = validate(&s);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].at, 0);
    }

    #[test]
    fn ccall_index_boundary() {
        let ok = assemble(".prim print_int\nC_CALL 0 1").unwrap();
        assert!(validate(&ok).is_empty());
        let bad = assemble(".prim print_int\nC_CALL 1 1").unwrap();
        assert_eq!(validate(&bad).len(), 1);
    }

    #[test]
    fn global_index_boundary() {
        let bad = assemble(".global 1\nGETGLOBAL 1").unwrap();
        assert_eq!(validate(&bad).len(), 1);
        let ok = assemble(".global 1\nGETGLOBAL 0").unwrap();
        assert!(validate(&ok).is_empty());
    }

    #[test]
    fn missing_stop_and_truncation() {
        let s = Segment { words: vec![Opcode::Push as i32], ..Segment::default() };
        assert_eq!(validate(&s).len(), 1);
        let s = Segment { words: vec![Opcode::ConstInt as i32], ..Segment::default() };
        assert_eq!(validate(&s).len(), 1);
    }

    #[test]
    fn grab_needs_restart() {
        let s = assemble("BRANCH e\nRESTART\nf: GRAB 1\nRETURN 2\ne: STOP").unwrap();
        assert!(validate(&s).is_empty());
        let s = assemble("BRANCH e\nf: GRAB 1\nRETURN 2\ne: STOP").unwrap();
        assert_eq!(validate(&s).len(), 1);
    }
}
