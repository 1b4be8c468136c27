//! Bundled programs: the benchmark suite and a hand-written corpus.

use crate::bytecode::asm::{assemble, AsmError};
use crate::bytecode::Segment;
use crate::lambda::{compile_lambda, parse_lambda, CompileError, ParseError};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lang {
    /// Lambda-language source.
    Zl,
    /// Assembly.
    Zasm,
}

#[derive(Clone, Copy, Debug)]
pub struct Program {
    pub name: &'static str,
    pub lang: Lang,
    pub source: &'static str,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Asm(#[from] AsmError),
}

impl Program {
    pub fn segment(&self) -> Result<Segment, SourceError> {
        compile_source(self.lang, self.source)
    }
}

pub fn compile_source(lang: Lang, src: &str) -> Result<Segment, SourceError> {
    Ok(match lang {
        Lang::Zl => compile_lambda(&parse_lambda(src)?)?,
        Lang::Zasm => assemble(src)?,
    })
}

macro_rules! programs {
    ($dir:literal; $($name:literal $lang:ident),* $(,)?) => {
        &[$(Program {
            name: $name,
            lang: Lang::$lang,
            source: include_str!(concat!("../programs/", $dir, "/", $name, programs!(@ext $lang))),
        }),*]
    };
    (@ext Zl) => { ".zl" };
    (@ext Zasm) => { ".zasm" };
}

pub const BENCHMARKS: &[Program] = programs!("bench";
    "fib" Zl, "tak" Zl, "quicksort" Zl, "list-sort" Zl, "float-loop" Zl, "nested-exception" Zl,
);

pub const CORPUS: &[Program] = programs!("corpus";
    "fig4" Zl, "strings" Zl, "floats" Zl, "higher-order" Zl, "exceptions" Zl, "uncaught" Zl,
    "switch" Zl, "methods" Zl, "loops" Zl, "gc-storm" Zl, "deep-recursion" Zl, "mutual" Zl,
    "first-touch" Zl, "arrays" Zl, "bits" Zl,
    "int-ops" Zasm, "branches" Zasm, "closures" Zasm, "blocks" Zasm, "loop" Zasm, "switch" Zasm,
    "raise" Zasm, "divzero" Zasm,
);

/// Benchmarks followed by the corpus.
pub fn all() -> impl Iterator<Item = &'static Program> {
    BENCHMARKS.iter().chain(CORPUS)
}

pub fn benchmark(name: &str) -> Option<&'static Program> {
    BENCHMARKS.iter().find(|p| p.name == name)
}
