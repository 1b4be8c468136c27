//! Benchmark matrix: median CPU and wall time per program and engine, with
//! speedups over the switch interpreter and emitted-code sizes.

use serde::Serialize;
use std::fmt::Write;
use std::time::Instant;
use zvm_core::bytecode::Segment;
use zvm_core::engine::{self, EngineError, EngineKind, Run, RunConfig};
use zvm_core::prims::Registry;
use zvm_core::programs::Program;

/// Process CPU time in seconds.
pub fn cpu_time() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer.
    unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub cpu_s: f64,
    pub wall_s: f64,
    /// The last timed run.
    pub run: Run,
}

/// Times `iterations` complete runs (load, compile and execute) after
/// `warmup` untimed ones and returns the medians.
pub fn measure(
    seg: &Segment,
    registry: &Registry,
    cfg: &RunConfig,
    warmup: usize,
    iterations: usize,
) -> Result<Sample, EngineError> {
    for _ in 0..warmup {
        engine::run(seg, registry, cfg)?;
    }
    let iterations = iterations.max(1);
    let (mut cpu, mut wall) = (Vec::with_capacity(iterations), Vec::with_capacity(iterations));
    let mut last = None;
    for _ in 0..iterations {
        let (c0, w0) = (cpu_time(), Instant::now());
        let r = engine::run(seg, registry, cfg)?;
        wall.push(w0.elapsed().as_secs_f64());
        cpu.push(cpu_time() - c0);
        last = Some(r);
    }
    Ok(Sample { cpu_s: median(&mut cpu), wall_s: median(&mut wall), run: last.expect("one iteration") })
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub engines: Vec<EngineKind>,
    pub base: RunConfig,
    pub warmup: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub program: String,
    pub engine: String,
    pub cpu_s: f64,
    pub wall_s: f64,
    pub code_bytes: u64,
    pub minor_gcs: u64,
    /// Switch-interpreter CPU time over this engine's, both medians.
    pub sigma: Option<f64>,
    /// Code bytes with stack-offset elision turned off.
    pub code_bytes_no_elide: Option<u64>,
    pub duplicates: u64,
    pub result: String,
}

impl Row {
    /// Size reduction from elision, in percent.
    pub fn elision_pct(&self) -> Option<f64> {
        let plain = self.code_bytes_no_elide? as f64;
        (plain > 0.0).then(|| 100.0 * (plain - self.code_bytes as f64) / plain)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{program}: {source}")]
    Source { program: String, source: zvm_core::programs::SourceError },
    #[error("{program} on {engine}: {source}")]
    Engine { program: String, engine: EngineKind, source: EngineError },
    #[error("{program}: {engine} returned {got}, switch returned {want}")]
    Mismatch { program: String, engine: EngineKind, got: String, want: String },
}

pub fn bench(programs: &[&Program], cfg: &BenchConfig) -> Result<Vec<Row>, BenchError> {
    let registry = Registry::builtins();
    let mut rows = Vec::new();
    for p in programs {
        let seg = p.segment().map_err(|source| BenchError::Source { program: p.name.into(), source })?;
        let engine_err = |engine, source| BenchError::Engine { program: p.name.into(), engine, source };
        let mut baseline: Option<(f64, String)> = None;
        for &e in &cfg.engines {
            let mut rc = cfg.base.clone();
            rc.engine = e;
            let s = measure(&seg, &registry, &rc, cfg.warmup, cfg.iterations).map_err(|err| engine_err(e, err))?;
            let result = s.run.result.outcome.to_string();
            let no_elide = if e.is_jit() {
                let mut plain = rc.clone();
                plain.jit.stack_elide = false;
                let r = engine::run(&seg, &registry, &plain).map_err(|err| engine_err(e, err))?;
                Some(r.stats.code_bytes)
            } else {
                None
            };
            if e == EngineKind::Switch {
                baseline = Some((s.cpu_s, result.clone()));
            }
            if let Some((_, want)) = &baseline {
                if *want != result {
                    return Err(BenchError::Mismatch { program: p.name.into(), engine: e, got: result, want: want.clone() });
                }
            }
            rows.push(Row {
                program: p.name.into(),
                engine: e.name().into(),
                cpu_s: s.cpu_s,
                wall_s: s.wall_s,
                code_bytes: s.run.stats.code_bytes,
                minor_gcs: s.run.result.minor_gcs,
                sigma: baseline.as_ref().map(|(t, _)| t / s.cpu_s.max(1e-9)),
                code_bytes_no_elide: no_elide,
                duplicates: s.run.stats.duplicates,
                result,
            });
        }
    }
    Ok(rows)
}

/// Fixed-shape text table; only the timing columns vary between runs.
pub fn table(rows: &[Row], cfg: &BenchConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "minor heap {} bytes, arena {} bytes, {} warmup, {} iterations (medians)",
        cfg.base.vm.heap.minor_bytes, cfg.base.jit.arena_size, cfg.warmup, cfg.iterations
    );
    let _ = writeln!(
        s,
        "{:<18} {:<11} {:>9} {:>9} {:>7} {:>9} {:>9} {:>7} {:>5} {:>6}  result",
        "program", "engine", "cpu_s", "wall_s", "sigma", "code", "no-elide", "elide%", "dups", "gcs"
    );
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:<11} {:>9.4} {:>9.4} {:>7} {:>9} {:>9} {:>7} {:>5} {:>6}  {}",
            r.program,
            r.engine,
            r.cpu_s,
            r.wall_s,
            opt(r.sigma.map(|x| format!("{x:.2}"))),
            r.code_bytes,
            opt(r.code_bytes_no_elide.map(|x| x.to_string())),
            opt(r.elision_pct().map(|x| format!("{x:.1}"))),
            r.duplicates,
            r.minor_gcs,
            r.result
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use zvm_core::programs::benchmark;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut []), 0.0);
    }

    #[test]
    fn report_shape_is_fixed() {
        let p = benchmark("nested-exception").unwrap();
        let cfg = BenchConfig {
            engines: EngineKind::available(),
            base: RunConfig::new(EngineKind::Switch),
            warmup: 0,
            iterations: 1,
        };
        let rows = bench(&[p], &cfg).unwrap();
        assert_eq!(rows.len(), cfg.engines.len());
        assert!(rows.iter().all(|r| r.result == "int 54000"));
        assert_eq!(rows[0].sigma, Some(1.0));
        for r in rows.iter().filter(|r| r.engine.starts_with("jit")) {
            assert!(r.code_bytes < r.code_bytes_no_elide.unwrap(), "{}", r.engine);
        }
        let t = table(&rows, &cfg);
        assert_eq!(t.lines().count(), 2 + rows.len());
    }
}
