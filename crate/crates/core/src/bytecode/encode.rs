use super::{Arity, Instr, Opcode};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{op}: operand {value} does not fit its field")]
    OperandOverflow { op: Opcode, value: i64 },
    #[error("{op}: expected {expected} operands, got {got}")]
    WrongArity { op: Opcode, expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad opcode {word} at word {at}")]
    BadOpcode { at: usize, word: i32 },
    #[error("instruction at word {at} runs past the end of the segment")]
    Truncated { at: usize },
    #[error("negative table count at word {at}")]
    BadCount { at: usize },
}

fn word(op: Opcode, v: i64) -> Result<i32, EncodeError> {
    i32::try_from(v).map_err(|_| EncodeError::OperandOverflow { op, value: v })
}

pub fn encode(i: &Instr) -> Result<Vec<i32>, EncodeError> {
    let op = i.op;
    let wrong = |expected| EncodeError::WrongArity { op, expected, got: i.args.len() };
    let mut out = vec![op as i32];
    match op.arity() {
        Arity::Fixed(kinds) => {
            if kinds.len() != i.args.len() {
                return Err(wrong(kinds.len()));
            }
            for &a in &i.args {
                out.push(word(op, a)?);
            }
        }
        Arity::ClosureRec => {
            let f = *i.args.first().ok_or_else(|| wrong(2))?;
            if f < 0 {
                return Err(EncodeError::OperandOverflow { op, value: f });
            }
            if i.args.len() != 2 + f as usize {
                return Err(wrong(2 + f as usize));
            }
            for &a in &i.args {
                out.push(word(op, a)?);
            }
        }
        Arity::Switch => {
            if i.args.len() < 2 {
                return Err(wrong(2));
            }
            let (p, q) = (i.args[0], i.args[1]);
            for c in [p, q] {
                if !(0..=0xFFFF).contains(&c) {
                    return Err(EncodeError::OperandOverflow { op, value: c });
                }
            }
            if i.args.len() != 2 + (p + q) as usize {
                return Err(wrong(2 + (p + q) as usize));
            }
            out.push((p | q << 16) as i32);
            for &a in &i.args[2..] {
                out.push(word(op, a)?);
            }
        }
    }
    Ok(out)
}

/// Number of words the instruction at `at` occupies.
pub fn instr_len(words: &[i32], at: usize) -> Result<usize, DecodeError> {
    let w = *words.get(at).ok_or(DecodeError::Truncated { at })?;
    let op = Opcode::from_word(w).ok_or(DecodeError::BadOpcode { at, word: w })?;
    let operand = |k: usize| words.get(at + k).copied().ok_or(DecodeError::Truncated { at });
    let len = match op.arity() {
        Arity::Fixed(kinds) => 1 + kinds.len(),
        Arity::ClosureRec => {
            let f = operand(1)?;
            if f < 0 {
                return Err(DecodeError::BadCount { at });
            }
            3 + f as usize
        }
        Arity::Switch => {
            let packed = operand(1)? as u32;
            2 + (packed & 0xFFFF) as usize + (packed >> 16) as usize
        }
    };
    if at + len > words.len() {
        return Err(DecodeError::Truncated { at });
    }
    Ok(len)
}

/// Decodes the instruction at `at`, returning it with the index of the next one.
pub fn decode(words: &[i32], at: usize) -> Result<(Instr, usize), DecodeError> {
    let len = instr_len(words, at)?;
    let op = Opcode::from_word(words[at]).expect("checked by instr_len");
    let body = &words[at + 1..at + len];
    let args = if op == Opcode::Switch {
        let packed = body[0] as u32;
        let mut a = vec![(packed & 0xFFFF) as i64, (packed >> 16) as i64];
        a.extend(body[1..].iter().map(|&w| w as i64));
        a
    } else {
        body.iter().map(|&w| w as i64).collect()
    };
    Ok((Instr { op, args }, at + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simple_encodings() {
        assert_eq!(encode(&Instr::new(Opcode::Push, &[])).unwrap(), vec![Opcode::Push as i32]);
        assert_eq!(
            encode(&Instr::new(Opcode::ConstInt, &[1])).unwrap(),
            vec![Opcode::ConstInt as i32, 1]
        );
    }

    #[test]
    fn offsetint_decodes() {
        let (i, next) = decode(&[Opcode::OffsetInt as i32, 3], 0).unwrap();
        assert_eq!(i, Instr::new(Opcode::OffsetInt, &[3]));
        assert_eq!(next, 2);
    }

    #[test]
    fn truncated_operands() {
        assert_eq!(decode(&[Opcode::ConstInt as i32], 0), Err(DecodeError::Truncated { at: 0 }));
        assert_eq!(
            decode(&[Opcode::Switch as i32, 2], 0),
            Err(DecodeError::Truncated { at: 0 })
        );
    }

    #[test]
    fn negative_word_is_bad_opcode() {
        assert_eq!(decode(&[-12], 0), Err(DecodeError::BadOpcode { at: 0, word: -12 }));
    }

    #[test]
    fn switch_word_count() {
        let i = Instr::new(Opcode::Switch, &[2, 1, 3, 4, 5]);
        let w = encode(&i).unwrap();
        assert_eq!(w.len(), 1 + 1 + 3);
        assert_eq!(w[1], 2 | (1 << 16));
        assert_eq!(decode(&w, 0).unwrap(), (i, 5));
    }

    #[test]
    fn closurerec_reads_counts_then_offsets() {
        let i = Instr::new(Opcode::ClosureRec, &[2, 1, 10, 20]);
        let w = encode(&i).unwrap();
        assert_eq!(w, vec![Opcode::ClosureRec as i32, 2, 1, 10, 20]);
        assert_eq!(decode(&w, 0).unwrap().0, i);
    }

    #[test]
    fn overflow_and_arity_errors() {
        assert!(matches!(
            encode(&Instr::new(Opcode::ConstInt, &[1 << 40])),
            Err(EncodeError::OperandOverflow { .. })
        ));
        assert!(matches!(
            encode(&Instr::new(Opcode::AppTerm, &[1])),
            Err(EncodeError::WrongArity { expected: 2, .. })
        ));
        assert!(matches!(
            encode(&Instr::new(Opcode::Switch, &[70000, 0])),
            Err(EncodeError::OperandOverflow { .. })
        ));
    }

    #[test]
    fn nullary_and_unary_exhaustive() {
        let samples = [0i64, 1, -1, 7, i32::MAX as i64, i32::MIN as i64];
        for op in Opcode::all() {
            let Arity::Fixed(kinds) = op.arity() else { continue };
            match kinds.len() {
                0 => {
                    let i = Instr::new(op, &[]);
                    assert_eq!(decode(&encode(&i).unwrap(), 0).unwrap().0, i);
                }
                1 => {
                    for &a in &samples {
                        let i = Instr::new(op, &[a]);
                        assert_eq!(decode(&encode(&i).unwrap(), 0).unwrap().0, i);
                    }
                }
                _ => {}
            }
        }
    }

    fn any_instr() -> impl Strategy<Value = Instr> {
        let fixed = (0..super::super::NUM_OPCODES, prop::collection::vec(any::<i32>(), 2)).prop_filter_map(
            "fixed arity",
            |(o, ops)| {
                let op = Opcode::from_word(o as i32)?;
                let Arity::Fixed(kinds) = op.arity() else { return None };
                Some(Instr { op, args: ops[..kinds.len()].iter().map(|&w| w as i64).collect() })
            },
        );
        let rec = (1usize..8, any::<i32>(), prop::collection::vec(any::<i32>(), 8)).prop_map(|(f, v, ks)| {
            let mut args = vec![f as i64, v as i64];
            args.extend(ks[..f].iter().map(|&k| k as i64));
            Instr { op: Opcode::ClosureRec, args }
        });
        let sw = (0usize..6, 0usize..6, prop::collection::vec(any::<i32>(), 12)).prop_map(|(p, q, ks)| {
            let mut args = vec![p as i64, q as i64];
            args.extend(ks[..p + q].iter().map(|&k| k as i64));
            Instr { op: Opcode::Switch, args }
        });
        prop_oneof![fixed, rec, sw]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn decode_inverts_encode(i in any_instr()) {
            let w = encode(&i).unwrap();
            prop_assert_eq!(instr_len(&w, 0).unwrap(), w.len());
            prop_assert_eq!(i.word_len(), w.len());
            prop_assert_eq!(decode(&w, 0).unwrap(), (i, w.len()));
        }
    }
}
