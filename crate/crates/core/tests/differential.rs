//! All engines against each other, and compiled lambda programs against the
//! tree-walk evaluator.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;
use zvm_core::programs::{self, Lang};
use zvm_testkit::{diff, gen};

fn random_program(seed: u64) -> String {
    gen::program(&mut StdRng::seed_from_u64(seed), 6)
}

#[test]
fn bundled_programs_agree_across_engines() {
    for p in programs::all() {
        diff::agree(p.lang, p.source).unwrap_or_else(|e| panic!("{}: {e}", p.name));
    }
}

#[test]
fn lambda_corpus_matches_evaluator() {
    for p in programs::all().filter(|p| p.lang == Lang::Zl) {
        diff::check_lambda(p.source).unwrap_or_else(|e| panic!("{}: {e}", p.name));
    }
}

#[test]
fn fixed_random_corpus() {
    // With the bundled programs this is well over fifty programs.
    for seed in 0..64 {
        let src = random_program(seed);
        diff::check_lambda(&src).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{src}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_programs_agree(seed in any::<u64>()) {
        let src = random_program(seed);
        if let Err(e) = diff::check_lambda(&src) {
            prop_assert!(false, "{}\n{}", e, src);
        }
    }
}
