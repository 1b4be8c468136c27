//! One entry point over the four execution engines.

use crate::bytecode::Segment;
use crate::interp::threaded::{run_threaded, thread_code, ThreadError};
use crate::interp::{LoadError, Vm, VmConfig};
use crate::jit::{Emitter, JitError, JitOptions};
use crate::native::NativeJit;
use crate::observe::{RunResult, RunStats};
use crate::prims::Registry;
use crate::trace::{self, TraceError};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EngineKind {
    Switch,
    Threaded,
    JitTrace,
    JitNative,
}

impl EngineKind {
    pub const ALL: [EngineKind; 4] = [EngineKind::Switch, EngineKind::Threaded, EngineKind::JitTrace, EngineKind::JitNative];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Switch => "switch",
            EngineKind::Threaded => "threaded",
            EngineKind::JitTrace => "jit-trace",
            EngineKind::JitNative => "jit-native",
        }
    }

    pub fn is_jit(self) -> bool {
        matches!(self, EngineKind::JitTrace | EngineKind::JitNative)
    }

    /// Engines usable on this host.
    pub fn available() -> Vec<EngineKind> {
        EngineKind::ALL.into_iter().filter(|e| *e != EngineKind::JitNative || cfg!(target_arch = "x86_64")).collect()
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown engine `{0}` (expected switch, threaded, jit-trace or jit-native)")]
pub struct UnknownEngine(pub String);

impl FromStr for EngineKind {
    type Err = UnknownEngine;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineKind::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| UnknownEngine(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub engine: EngineKind,
    pub vm: VmConfig,
    pub jit: JitOptions,
    /// Keep the translation log and return a dump of the generated code.
    pub dump_jit: bool,
}

impl RunConfig {
    pub fn new(engine: EngineKind) -> RunConfig {
        RunConfig { engine, vm: VmConfig::default(), jit: JitOptions::default(), dump_jit: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
    #[error(transparent)]
    Jit(#[from] JitError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Debug)]
pub struct Run {
    pub result: RunResult,
    pub stats: RunStats,
    pub dump: Option<String>,
}

/// Loads `seg` and runs it from pc 0 on the configured engine.
pub fn run(seg: &Segment, registry: &Registry, cfg: &RunConfig) -> Result<Run, EngineError> {
    let mut vcfg = cfg.vm.clone();
    if cfg.engine.is_jit() {
        // Generated code does not maintain the shadow frame stack.
        vcfg.check_frames = false;
    }
    let mut vm = Vm::new(seg, registry, &vcfg)?;
    vm.check_prim_arities(seg)?;
    let mut stats = RunStats::default();
    let mut dump = None;
    let exit = match cfg.engine {
        EngineKind::Switch => vm.run_switch(0),
        EngineKind::Threaded => {
            let base = thread_code(&mut vm.code)?;
            run_threaded(&mut vm, base, 0)
        }
        EngineKind::JitTrace => {
            let mut jit = trace::new_jit(cfg.jit, vm.code.len())?;
            jit.ts.keep_log = cfg.dump_jit;
            let start = jit.compile(&mut vm.code, 0)?;
            let exit = trace::execute(&mut vm, &mut jit, start)?;
            stats.code_bytes = jit.emitter.cursor() as u64;
            stats.sled_entries = jit.emitter.sled_entries;
            fill_jit_stats(&mut stats, &jit.ts.stats);
            if cfg.dump_jit {
                dump = Some(jit.emitter.dump());
            }
            exit
        }
        EngineKind::JitNative => {
            let mut jit = NativeJit::new(cfg.jit, &vm)?;
            native_run(&mut vm, &mut jit, cfg.dump_jit, &mut stats, &mut dump)?
        }
    };
    stats.counters = vm.counters;
    Ok(Run { result: RunResult::from_exit(&vm, exit), stats, dump })
}

fn fill_jit_stats(stats: &mut RunStats, js: &crate::jit::JitStats) {
    stats.compiles = js.compiles;
    stats.blocks = js.blocks;
    stats.translated = js.instructions;
    stats.duplicates = js.duplicates;
}

#[cfg(target_arch = "x86_64")]
fn native_run(
    vm: &mut Vm,
    jit: &mut NativeJit,
    dump_jit: bool,
    stats: &mut RunStats,
    dump: &mut Option<String>,
) -> Result<crate::interp::Exit, EngineError> {
    jit.tr.ts.keep_log = dump_jit;
    jit.compile(&mut vm.code, 0)?;
    let exit = jit.run(vm, 0)?;
    stats.code_bytes = jit.code_bytes();
    stats.sled_entries = jit.sled_entries;
    fill_jit_stats(stats, &jit.tr.ts.stats);
    if dump_jit {
        *dump = Some(jit.dump());
    }
    Ok(exit)
}

#[cfg(not(target_arch = "x86_64"))]
fn native_run(
    vm: &mut Vm,
    jit: &mut NativeJit,
    _: bool,
    _: &mut RunStats,
    _: &mut Option<String>,
) -> Result<crate::interp::Exit, EngineError> {
    Ok(jit.run(vm, 0)?)
}

/// Translates the blocks statically reachable from pc 0 without running
/// anything. Interpreter engines report empty stats.
pub fn compile_only(seg: &Segment, registry: &Registry, cfg: &RunConfig) -> Result<RunStats, EngineError> {
    let vm = Vm::new(seg, registry, &cfg.vm)?;
    let mut words = vm.code.clone();
    let mut stats = RunStats::default();
    match cfg.engine {
        EngineKind::JitTrace => {
            let mut jit = trace::new_jit(cfg.jit, words.len())?;
            jit.compile(&mut words, 0)?;
            stats.code_bytes = jit.emitter.cursor() as u64;
            fill_jit_stats(&mut stats, &jit.ts.stats);
        }
        EngineKind::JitNative => native_compile(&vm, &mut words, cfg.jit, &mut stats)?,
        _ => {}
    }
    Ok(stats)
}

#[cfg(target_arch = "x86_64")]
fn native_compile(vm: &Vm, words: &mut [i32], options: JitOptions, stats: &mut RunStats) -> Result<(), EngineError> {
    let mut jit = NativeJit::new(options, vm)?;
    jit.compile(words, 0)?;
    stats.code_bytes = jit.code_bytes();
    fill_jit_stats(stats, &jit.tr.ts.stats);
    Ok(())
}

#[cfg(not(target_arch = "x86_64"))]
fn native_compile(vm: &Vm, _: &mut [i32], options: JitOptions, _: &mut RunStats) -> Result<(), EngineError> {
    NativeJit::new(options, vm)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::observe::Outcome;

    #[test]
    fn names_round_trip() {
        for e in EngineKind::ALL {
            assert_eq!(e.name().parse::<EngineKind>().unwrap(), e);
        }
        assert!("jit".parse::<EngineKind>().is_err());
    }

    #[test]
    fn fig4_on_every_engine() {
        let seg = assemble("CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3\nPOP 1\nSTOP").unwrap();
        for e in EngineKind::available() {
            let r = run(&seg, &Registry::builtins(), &RunConfig::new(e)).unwrap();
            assert_eq!(r.result.outcome, Outcome::Value("int 4".into()), "{e}");
        }
    }
}
