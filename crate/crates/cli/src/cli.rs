//! Argument parsing and subcommands.

use crate::bench::{self, BenchConfig};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use zvm_core::bytecode::asm::{assemble, disassemble};
use zvm_core::bytecode::validate::validate;
use zvm_core::bytecode::zbc::{load_segment, store_segment};
use zvm_core::bytecode::Segment;
use zvm_core::engine::{self, EngineKind, RunConfig};
use zvm_core::interp::VmConfig;
use zvm_core::jit::JitOptions;
use zvm_core::observe::Outcome;
use zvm_core::prims::Registry;
use zvm_core::programs::{self, compile_source, Lang, Program};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const ARENA_ENV: &str = "ZVM_ARENA_SIZE";

#[derive(Parser, Debug)]
#[command(name = "zvm", version, about = "ZINC-style bytecode VM with interpreters and a template JIT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a program (.zbc, .zasm or .zl) and print its result.
    Run {
        file: PathBuf,
        #[command(flatten)]
        opts: EngineOpts,
        /// Print the JIT emission log to stderr.
        #[arg(long)]
        dump_jit: bool,
    },
    /// Assemble a .zasm file into .zbc.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a .zbc file as assembly.
    Disasm { input: PathBuf },
    /// Compile a .zl lambda program to .zbc, or to .zasm with that extension.
    Lc {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check a program for static errors.
    Validate { input: PathBuf },
    /// Time the bundled benchmarks on each engine.
    Bench {
        #[command(flatten)]
        opts: EngineOpts,
        /// Engines to measure (default: the interpreters and, on x86-64, the native JIT).
        #[arg(long = "engines", value_delimiter = ',')]
        engines: Vec<EngineKind>,
        /// Benchmarks to run (default: all).
        #[arg(long = "programs", value_delimiter = ',')]
        programs: Vec<String>,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Emit the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run every bundled program on every engine and compare.
    Selftest {
        #[command(flatten)]
        opts: EngineOpts,
    },
}

#[derive(Args, Debug, Clone)]
pub struct EngineOpts {
    #[arg(long, default_value = "switch")]
    pub engine: EngineKind,
    #[arg(long)]
    pub no_float_inline: bool,
    #[arg(long)]
    pub no_stack_elide: bool,
    /// Keep the code arena non-writable while generated code runs.
    #[arg(long)]
    pub wx: bool,
    /// Minor heap size in bytes.
    #[arg(long)]
    pub minor_size: Option<usize>,
    /// Stack size in words.
    #[arg(long)]
    pub stack_slots: Option<usize>,
    /// Fault after this many instructions (interpreters only).
    #[arg(long)]
    pub step_budget: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

fn failed(e: impl std::fmt::Display) -> Error {
    Error::Failed(e.to_string())
}

impl EngineOpts {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut jit = JitOptions {
            stack_elide: !self.no_stack_elide,
            float_inline: !self.no_float_inline,
            wx: self.wx,
            ..JitOptions::default()
        };
        if let Some(v) = std::env::var_os(ARENA_ENV) {
            let s = v.to_string_lossy();
            jit.arena_size = s.parse().map_err(|_| Error::Usage(format!("{ARENA_ENV}: not a byte count: {s}")))?;
            if jit.arena_size > zvm_core::jit::MAX_ARENA_SIZE {
                return Err(Error::Usage(format!("{ARENA_ENV}: {s} exceeds {}", zvm_core::jit::MAX_ARENA_SIZE)));
            }
        }
        let mut vm = VmConfig::default();
        if let Some(n) = self.minor_size {
            vm.heap.minor_bytes = n;
        }
        if let Some(n) = self.stack_slots {
            vm.stack_slots = n;
        }
        vm.step_budget = self.step_budget;
        Ok(RunConfig { engine: self.engine, vm, jit, dump_jit: false })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Error> {
    String::from_utf8(read(path)?).map_err(|_| failed(format!("{}: not UTF-8", path.display())))
}

fn ext(path: &Path) -> &str {
    path.extension().and_then(|e| e.to_str()).unwrap_or("")
}

/// Loads a program by extension: .zl and .zasm are compiled, anything else
/// is read as .zbc.
fn load_inner(path: &Path) -> Result<Segment, Error> {
    let at = |e: &dyn std::fmt::Display| failed(format!("{}: {e}", path.display()));
    match ext(path) {
        "zl" => compile_source(Lang::Zl, &read_text(path)?).map_err(|e| at(&e)),
        "zasm" => compile_source(Lang::Zasm, &read_text(path)?).map_err(|e| at(&e)),
        _ => load_segment(&read(path)?).map_err(|e| at(&e)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn segment_bytes(seg: &Segment, out: &Path) -> Result<Vec<u8>, Error> {
    Ok(if ext(out) == "zasm" { disassemble(seg).map_err(failed)?.into_bytes() } else { store_segment(seg) })
}

fn cmd_run(file: &Path, opts: &EngineOpts, dump_jit: bool, out: &mut dyn Write) -> Result<i32, Error> {
    let seg = load_inner(file)?;
    // The engines trust their code, so reject anything malformed up front.
    if let Some(d) = validate(&seg).first() {
        return Err(failed(format!("{}: {d}", file.display())));
    }
    let mut cfg = opts.config()?;
    cfg.dump_jit = dump_jit;
    let run = engine::run(&seg, &Registry::builtins(), &cfg).map_err(failed)?;
    let _ = out.write_all(&run.result.output);
    if let Some(d) = &run.dump {
        eprint!("{d}");
    }
    let c = run.stats.counters;
    eprintln!(
        "engine {}: {} instructions, {} dispatches, {} minor collections, {} code bytes",
        cfg.engine, c.instructions, c.dispatches, run.result.minor_gcs, run.stats.code_bytes
    );
    match &run.result.outcome {
        Outcome::Value(v) => {
            let _ = writeln!(out, "{v}");
            Ok(EXIT_OK)
        }
        other => {
            eprintln!("{other}");
            Ok(EXIT_ERROR)
        }
    }
}

fn cmd_validate(input: &Path, out: &mut dyn Write) -> Result<i32, Error> {
    let seg = load_inner(input)?;
    let diags = validate(&seg);
    for d in &diags {
        let _ = writeln!(out, "{d}");
    }
    if diags.is_empty() {
        let _ = writeln!(out, "ok: {} words", seg.words.len());
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_ERROR)
    }
}

/// The trace backend is a test oracle rather than a performance engine.
pub fn default_bench_engines() -> Vec<EngineKind> {
    EngineKind::available().into_iter().filter(|e| *e != EngineKind::JitTrace).collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    opts: &EngineOpts,
    engines: &[EngineKind],
    names: &[String],
    iterations: usize,
    warmup: usize,
    json: bool,
    out: &mut dyn Write,
) -> Result<i32, Error> {
    let engines = if engines.is_empty() { default_bench_engines() } else { engines.to_vec() };
    let mut selected: Vec<&Program> = Vec::new();
    if names.is_empty() {
        selected.extend(programs::BENCHMARKS);
    }
    for n in names {
        selected.push(programs::benchmark(n).ok_or_else(|| Error::Usage(format!("unknown benchmark `{n}`")))?);
    }
    let cfg = BenchConfig { engines, base: opts.config()?, warmup, iterations };
    let rows = bench::bench(&selected, &cfg).map_err(failed)?;
    if json {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&rows).map_err(failed)?);
    } else {
        let _ = write!(out, "{}", bench::table(&rows, &cfg));
    }
    Ok(EXIT_OK)
}

fn cmd_selftest(opts: &EngineOpts, out: &mut dyn Write) -> Result<i32, Error> {
    let base = opts.config()?;
    let registry = Registry::builtins();
    let engines = EngineKind::available();
    let mut bad = 0;
    let mut n = 0;
    for p in programs::all() {
        let seg = p.segment().map_err(|e| failed(format!("{}: {e}", p.name)))?;
        let mut first = None;
        for &e in &engines {
            let mut cfg = base.clone();
            cfg.engine = e;
            let r = engine::run(&seg, &registry, &cfg).map_err(|err| failed(format!("{} on {e}: {err}", p.name)))?;
            match &first {
                None => first = Some(r.result),
                Some(f) if *f != r.result => {
                    bad += 1;
                    let _ = writeln!(out, "MISMATCH {} on {e}: {} vs {}", p.name, r.result.outcome, f.outcome);
                }
                Some(_) => {}
            }
        }
        n += 1;
    }
    let names: Vec<&str> = engines.iter().map(|e| e.name()).collect();
    let _ = writeln!(out, "{n} programs on {}: {} mismatches", names.join(", "), bad);
    Ok(if bad == 0 { EXIT_OK } else { EXIT_ERROR })
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, Error> {
    match cli.command {
        Command::Run { file, opts, dump_jit } => cmd_run(&file, &opts, dump_jit, out),
        Command::Asm { input, output } => {
            let seg = assemble(&read_text(&input)?).map_err(|e| failed(format!("{}: {e}", input.display())))?;
            let output = output.unwrap_or_else(|| input.with_extension("zbc"));
            write_file(&output, &store_segment(&seg))?;
            Ok(EXIT_OK)
        }
        Command::Disasm { input } => {
            let seg = load_inner(&input)?;
            let _ = write!(out, "{}", disassemble(&seg).map_err(failed)?);
            Ok(EXIT_OK)
        }
        Command::Lc { input, output } => {
            let seg = compile_source(Lang::Zl, &read_text(&input)?)
                .map_err(|e| failed(format!("{}: {e}", input.display())))?;
            let output = output.unwrap_or_else(|| input.with_extension("zbc"));
            write_file(&output, &segment_bytes(&seg, &output)?)?;
            Ok(EXIT_OK)
        }
        Command::Validate { input } => cmd_validate(&input, out),
        Command::Bench { opts, engines, programs, iterations, warmup, json } => {
            cmd_bench(&opts, &engines, &programs, iterations, warmup, json, out)
        }
        Command::Selftest { opts } => cmd_selftest(&opts, out),
    }
}

/// Parses `args` (including the program name), runs the command with
/// stdout going to `out`, and returns the exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(Error::Usage(m)) => {
            eprintln!("usage error: {m}");
            EXIT_USAGE
        }
        Err(Error::Failed(m)) => {
            eprintln!("error: {m}");
            EXIT_ERROR
        }
    }
}
