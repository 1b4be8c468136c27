use zvm_core::bytecode::{Instr, Opcode};
use zvm_core::engine::{run, EngineKind, RunConfig};
use zvm_core::lambda::{compile_lambda, parse_lambda};
use zvm_core::observe::Outcome;
use zvm_core::prims::Registry;

const SRC: &str = "(let (x 1) (+ x 3))";

#[test]
fn let_plus_compiles_to_offsetint() {
    let seg = compile_lambda(&parse_lambda(SRC).unwrap()).unwrap();
    let ins: Vec<Instr> = seg.instructions().unwrap().into_iter().map(|(_, i)| i).collect();
    let head = [
        Instr::new(Opcode::ConstInt, &[1]),
        Instr::new(Opcode::Push, &[]),
        Instr::new(Opcode::Acc, &[0]),
        Instr::new(Opcode::OffsetInt, &[3]),
    ];
    assert_eq!(ins[..4], head);
    // Epilogue only: drop the binding and stop.
    assert_eq!(ins[4..], [Instr::new(Opcode::Pop, &[1]), Instr::new(Opcode::Stop, &[])]);
}

#[test]
fn evaluates_to_four_everywhere() {
    let seg = compile_lambda(&parse_lambda(SRC).unwrap()).unwrap();
    for e in EngineKind::available() {
        let r = run(&seg, &Registry::builtins(), &RunConfig::new(e)).unwrap();
        assert_eq!(r.result.outcome, Outcome::Value("int 4".into()), "{e}");
        assert!(r.result.output.is_empty());
    }
}
