use proptest::prelude::*;
use zvm_core::engine::{run, EngineKind, RunConfig};
use zvm_core::prims::Registry;
use zvm_core::programs::{self, CORPUS};
use zvm_testkit::heapfuzz;

#[test]
fn remembered_set_fuzz_ten_thousand_steps() {
    let st = heapfuzz::run(0x5eed, 10_000).unwrap();
    assert!(st.collections > 0 && st.max_remembered > 0, "{st:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn remembered_set_matches_shadow_graph(seed in any::<u64>()) {
        prop_assert_eq!(heapfuzz::run(seed, 10_000).err(), None);
    }
}

#[test]
fn gc_storm_collects_on_every_engine() {
    let p = CORPUS.iter().find(|p| p.name == "gc-storm").expect("gc-storm");
    let seg = p.segment().expect("compile");
    let reg = Registry::builtins();
    let mut first = None;
    for e in EngineKind::available() {
        let r = run(&seg, &reg, &RunConfig::new(e)).expect("run").result;
        assert!(r.minor_gcs >= 100, "{e}: only {} minor collections", r.minor_gcs);
        match &first {
            None => first = Some(r),
            Some(f) => assert_eq!(f, &r, "{e}"),
        }
    }
}

/// A tiny minor heap forces collections at many more program points; the
/// observable result must not change.
#[test]
fn small_minor_heap_preserves_results() {
    let reg = Registry::builtins();
    for p in programs::all() {
        let seg = p.segment().expect("compile");
        let base = run(&seg, &reg, &RunConfig::new(EngineKind::Switch)).expect("run").result;
        for e in EngineKind::available() {
            let mut cfg = RunConfig::new(e);
            cfg.vm.heap.minor_bytes = 4096;
            let r = run(&seg, &reg, &cfg).expect("run").result;
            assert_eq!((&r.outcome, &r.output), (&base.outcome, &base.output), "{} on {e}", p.name);
            assert!(r.minor_gcs >= base.minor_gcs, "{} on {e}", p.name);
        }
    }
}
