//! Instruction set, word encoding, segments and the tooling around them.

pub mod asm;
mod encode;
pub mod validate;
pub mod zbc;

pub use encode::{decode, encode, instr_len, DecodeError, EncodeError};

use std::fmt;

/// How the words following an opcode are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    /// Plain signed immediate.
    Imm,
    /// Code offset relative to the word holding it.
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Fixed(&'static [Operand]),
    /// `f v k1..kf`
    ClosureRec,
    /// packed counts, then one offset per int case and per tag case
    Switch,
}

use Operand::{Imm as I, Offset as O};

macro_rules! isa {
    ($($name:ident $mn:literal [$($k:ident),*]),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum Opcode { $($name),* }

        const TABLE: &[(Opcode, &str, Arity)] = &[
            $((Opcode::$name, $mn, Arity::Fixed(&[$($k),*]))),*
        ];
    };
}

isa! {
    Acc "ACC" [I], Push "PUSH" [], PushAcc "PUSHACC" [I], Pop "POP" [I],
    Assign "ASSIGN" [I], EnvAcc "ENVACC" [I], ConstInt "CONSTINT" [I], Atom "ATOM" [I],
    OffsetInt "OFFSETINT" [I], NegInt "NEGINT" [], BoolNot "BOOLNOT" [],
    AddInt "ADDINT" [], SubInt "SUBINT" [], MulInt "MULINT" [], DivInt "DIVINT" [],
    ModInt "MODINT" [], AndInt "ANDINT" [], OrInt "ORINT" [], XorInt "XORINT" [],
    LslInt "LSLINT" [], LsrInt "LSRINT" [], AsrInt "ASRINT" [],
    Eq "EQ" [], Neq "NEQ" [], LtInt "LTINT" [], LeInt "LEINT" [], GtInt "GTINT" [],
    GeInt "GEINT" [], IsInt "ISINT" [],
    Apply "APPLY" [I], AppTerm "APPTERM" [I, I], Return "RETURN" [I], Restart "RESTART" [],
    Grab "GRAB" [I], Closure "CLOSURE" [I, O], ClosureRec "CLOSUREREC" [],
    OffsetClosure "OFFSETCLOSURE" [I],
    MakeBlock "MAKEBLOCK" [I, I], MakeFloatBlock "MAKEFLOATBLOCK" [I],
    GetGlobal "GETGLOBAL" [I], SetGlobal "SETGLOBAL" [I], GetGlobalField "GETGLOBALFIELD" [I, I],
    GetField "GETFIELD" [I], SetField "SETFIELD" [I], GetFloatField "GETFLOATFIELD" [I],
    SetFloatField "SETFLOATFIELD" [I], GetStringChar "GETSTRINGCHAR" [],
    SetStringChar "SETSTRINGCHAR" [], VectLength "VECTLENGTH" [], GetVectItem "GETVECTITEM" [],
    SetVectItem "SETVECTITEM" [],
    Branch "BRANCH" [O], BranchIf "BRANCHIF" [O], BranchIfNot "BRANCHIFNOT" [O],
    Beq "BEQ" [I, O], Bneq "BNEQ" [I, O], BltInt "BLTINT" [I, O], BleInt "BLEINT" [I, O],
    BgtInt "BGTINT" [I, O], BgeInt "BGEINT" [I, O], Switch "SWITCH" [],
    PushTrap "PUSHTRAP" [O], PopTrap "POPTRAP" [], Raise "RAISE" [],
    CheckSignals "CHECK_SIGNALS" [], CCall "C_CALL" [I, I], GetMethod "GETMETHOD" [],
    Stop "STOP" [],
}

pub const NUM_OPCODES: usize = TABLE.len();

const _: () = assert!(NUM_OPCODES <= 146);

impl Opcode {
    pub fn from_word(w: i32) -> Option<Opcode> {
        usize::try_from(w).ok().and_then(|i| TABLE.get(i)).map(|e| e.0)
    }

    pub fn mnemonic(self) -> &'static str {
        TABLE[self as usize].1
    }

    pub fn arity(self) -> Arity {
        match self {
            Opcode::ClosureRec => Arity::ClosureRec,
            Opcode::Switch => Arity::Switch,
            _ => TABLE[self as usize].2,
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        let up = s.to_ascii_uppercase();
        let up = match up.as_str() {
            "CONST" => "CONSTINT",
            other => other,
        };
        TABLE.iter().find(|e| e.1 == up).map(|e| e.0)
    }

    pub fn all() -> impl Iterator<Item = Opcode> {
        TABLE.iter().map(|e| e.0)
    }

    /// Instructions after which control never falls through.
    pub fn ends_block(self) -> bool {
        matches!(
            self,
            Opcode::Stop | Opcode::Return | Opcode::AppTerm | Opcode::Raise | Opcode::Branch | Opcode::Switch
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One row of the instruction-set table.
#[derive(Clone, Copy, Debug)]
pub struct OpInfo {
    pub opcode: Opcode,
    pub mnemonic: &'static str,
    pub arity: Arity,
}

pub fn instruction_set() -> Vec<OpInfo> {
    Opcode::all()
        .map(|op| OpInfo {
            opcode: op,
            mnemonic: op.mnemonic(),
            arity: op.arity(),
        })
        .collect()
}

/// A decoded instruction. SWITCH operands are kept unpacked as
/// `[int_count, tag_count, offsets..]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instr {
    pub op: Opcode,
    pub args: Vec<i64>,
}

impl Instr {
    pub fn new(op: Opcode, args: &[i64]) -> Instr {
        Instr { op, args: args.to_vec() }
    }

    /// Encoded length in words.
    pub fn word_len(&self) -> usize {
        match self.op.arity() {
            Arity::Fixed(k) => 1 + k.len(),
            Arity::ClosureRec => 3 + self.args[0] as usize,
            Arity::Switch => self.args.len(),
        }
    }

    /// Code-offset operands as `(word, base)` pairs relative to the
    /// instruction start: the operand lives at `word` and its target is
    /// `start + base + value`. Plain offsets are relative to their own word;
    /// CLOSUREREC and SWITCH tables are relative to the first table word.
    pub fn offset_slots(&self) -> Vec<(usize, usize)> {
        match self.op.arity() {
            Arity::Fixed(kinds) => kinds
                .iter()
                .enumerate()
                .filter(|(_, k)| **k == Operand::Offset)
                .map(|(i, _)| (i + 1, i + 1))
                .collect(),
            Arity::ClosureRec => (3..3 + self.args.first().copied().unwrap_or(0).max(0) as usize)
                .map(|w| (w, 3))
                .collect(),
            Arity::Switch => (2..self.args.len()).map(|w| (w, 2)).collect(),
        }
    }

    /// Absolute targets of every code-offset operand, for an instruction at `at`.
    pub fn targets(&self, at: usize) -> Vec<i64> {
        self.offset_slots()
            .into_iter()
            .map(|(w, base)| at as i64 + base as i64 + self.arg_at_word(w))
            .collect()
    }

    /// Operand stored at encoded word `w` (SWITCH counts share word 1).
    fn arg_at_word(&self, w: usize) -> i64 {
        if self.op == Opcode::Switch {
            self.args[w]
        } else {
            self.args[w - 1]
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.op.mnemonic())?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

/// Initial value of a global slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GlobalInit {
    Int(i64),
    Str(Vec<u8>),
    Unit,
}

/// A loadable program: code words, global initializers and the names of the
/// primitives referenced by C_CALL.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segment {
    pub words: Vec<i32>,
    pub globals: Vec<GlobalInit>,
    pub prims: Vec<String>,
}

impl Segment {
    pub fn from_instrs(instrs: &[Instr]) -> Result<Segment, EncodeError> {
        let mut words = Vec::new();
        for i in instrs {
            words.extend(encode(i)?);
        }
        Ok(Segment {
            words,
            ..Segment::default()
        })
    }

    /// Decodes the whole segment as `(start index, instruction)` pairs.
    pub fn instructions(&self) -> Result<Vec<(usize, Instr)>, DecodeError> {
        let mut out = Vec::new();
        let mut at = 0;
        while at < self.words.len() {
            let (i, next) = decode(&self.words, at)?;
            out.push((at, i));
            at = next;
        }
        Ok(out)
    }

    pub fn prim_index(&mut self, name: &str) -> usize {
        match self.prims.iter().position(|p| p == name) {
            Some(i) => i,
            None => {
                self.prims.push(name.to_string());
                self.prims.len() - 1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcodes_are_dense_and_small() {
        for (i, op) in Opcode::all().enumerate() {
            assert_eq!(op as usize, i);
            assert_eq!(Opcode::from_word(i as i32), Some(op));
            assert!((op as usize) < 146);
        }
        assert_eq!(Opcode::from_word(NUM_OPCODES as i32), None);
        assert_eq!(Opcode::from_word(-1), None);
    }

    #[test]
    fn andint_is_nullary() {
        let row = instruction_set().into_iter().find(|r| r.mnemonic == "ANDINT").unwrap();
        assert_eq!(row.arity, Arity::Fixed(&[]));
    }

    #[test]
    fn mnemonic_lookup_is_case_insensitive() {
        assert_eq!(Opcode::from_mnemonic("offsetint"), Some(Opcode::OffsetInt));
        assert_eq!(Opcode::from_mnemonic("const"), Some(Opcode::ConstInt));
        assert_eq!(Opcode::from_mnemonic("c_call"), Some(Opcode::CCall));
        assert_eq!(Opcode::from_mnemonic("nope"), None);
    }

    #[test]
    fn isa_has_every_listed_class() {
        assert_eq!(NUM_OPCODES, 68);
        assert_eq!(Opcode::Stop as usize, NUM_OPCODES - 1);
    }
}
