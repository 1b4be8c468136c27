//! Differential execution: every engine on one program, and the evaluator
//! as an independent reference for lambda programs.

use crate::eval::evaluate;
use zvm_core::engine::{run, EngineKind, RunConfig};
use zvm_core::lambda::parse_lambda;
use zvm_core::observe::{Outcome, RunResult};
use zvm_core::prims::Registry;
use zvm_core::programs::{compile_source, Lang};

pub const FUEL: u64 = 50_000_000;

/// Runs `src` on every available engine and returns the common result, or
/// a description of the first disagreement.
pub fn agree(lang: Lang, src: &str) -> Result<RunResult, String> {
    let seg = compile_source(lang, src).map_err(|e| format!("compile: {e}"))?;
    let reg = Registry::builtins();
    let mut first: Option<(EngineKind, RunResult)> = None;
    for e in EngineKind::available() {
        let r = run(&seg, &reg, &RunConfig::new(e)).map_err(|err| format!("{e}: {err}"))?.result;
        match &first {
            None => first = Some((e, r)),
            Some((f, want)) if *want != r => {
                return Err(format!(
                    "{e} gave {} ({} gcs, {:?}), {f} gave {} ({} gcs, {:?})",
                    r.outcome,
                    r.minor_gcs,
                    r.output_str(),
                    want.outcome,
                    want.minor_gcs,
                    want.output_str()
                ))
            }
            Some(_) => {}
        }
    }
    first.map(|(_, r)| r).ok_or_else(|| "no engine available".into())
}

/// Evaluates a lambda program with the tree walker on a thread with a large
/// stack, since the walker recurses on the host stack.
pub fn reference(src: &str) -> Result<(Outcome, Vec<u8>), String> {
    let owned = src.to_string();
    std::thread::Builder::new()
        .stack_size(1 << 30)
        .spawn(move || {
            let e = parse_lambda(&owned).map_err(|e| e.to_string())?;
            let o = evaluate(&e, FUEL);
            o.outcome.map(|v| (v, o.output)).map_err(|m| format!("evaluator stuck: {m}"))
        })
        .map_err(|e| e.to_string())?
        .join()
        .map_err(|_| "evaluator panicked".to_string())?
}

/// Engines agree with each other and with the evaluator.
pub fn check_lambda(src: &str) -> Result<RunResult, String> {
    let r = agree(Lang::Zl, src)?;
    let (outcome, output) = reference(src)?;
    if r.outcome != outcome || r.output != output {
        return Err(format!(
            "machine gave {} {:?}, evaluator gave {} {:?}",
            r.outcome,
            r.output_str(),
            outcome,
            String::from_utf8_lossy(&output)
        ));
    }
    Ok(r)
}
