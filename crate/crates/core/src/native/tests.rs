use super::*;
use crate::bytecode::asm::assemble;
use crate::bytecode::{Opcode, Segment, NUM_OPCODES};
use crate::jit::Emitter;
use crate::interp::VmConfig;
use crate::lambda::{compile_lambda, parse_lambda};
use crate::prims::Registry;
use crate::value::Value;
use rand::{Rng, SeedableRng};

fn vm_for(seg: &Segment, cfg: &VmConfig) -> Vm {
    Vm::new(seg, &Registry::builtins(), cfg).unwrap()
}

fn native(seg: &Segment, options: JitOptions, cfg: &VmConfig) -> (Exit, Vm, NativeJit) {
    let mut vm = vm_for(seg, cfg);
    let mut jit = NativeJit::new(options, &vm).unwrap();
    jit.compile(&mut vm.code, 0).unwrap();
    let exit = jit.run(&mut vm, 0).unwrap();
    (exit, vm, jit)
}

fn interp(seg: &Segment, cfg: &VmConfig) -> (Exit, Vm) {
    let mut vm = vm_for(seg, cfg);
    let exit = vm.run_switch(0);
    (exit, vm)
}

fn small_arena() -> JitOptions {
    JitOptions { arena_size: 1 << 16, ..JitOptions::default() }
}

fn lc(src: &str) -> Segment {
    compile_lambda(&parse_lambda(src).unwrap()).unwrap()
}

#[test]
fn stop_only_returns_initial_accu() {
    let (exit, vm, _) = native(&assemble("STOP").unwrap(), small_arena(), &VmConfig::default());
    assert_eq!((exit, vm.accu), (Exit::Stop, Value::of_int(0)));
}

#[test]
fn fig4() {
    let seg = assemble("CONSTINT 1\nPUSH\nACC 0\nOFFSETINT 3\nPOP 1\nSTOP").unwrap();
    let (exit, vm, _) = native(&seg, small_arena(), &VmConfig::default());
    assert_eq!((exit, vm.accu), (Exit::Stop, Value::of_int(4)));
    assert_eq!(vm.sp, vm.stack_len());
}

#[test]
fn andint_template_reads_stack_top_without_moving_sp() {
    let seg = assemble("CONSTINT 3\nPUSH\nCONSTINT 6\nANDINT\nSTOP").unwrap();
    let mut vm = vm_for(&seg, &VmConfig::default());
    let mut jit = NativeJit::new(small_arena(), &vm).unwrap();
    jit.tr.ts.keep_log = true;
    jit.compile(&mut vm.code, 0).unwrap();
    let l = jit.tr.ts.log.iter().find(|l| l.op == Opcode::AndInt).unwrap();
    let e = &jit.tr.emitter;
    // PUSH left the offset at -1, so the slot is [r14-8].
    assert_eq!(e.arena.bytes(l.start, l.end), [0x49, 0x23, 0x46, 0xf8]);
    assert!(!l.mapped);
    assert_eq!(jit.run(&mut vm, 0).unwrap(), Exit::Stop);
    assert_eq!(vm.accu, Value::of_int(2));
    assert_eq!(vm.sp, vm.stack_len());

    let seg = assemble("CONSTINT 6\nANDINT\nSTOP").unwrap();
    let mut vm = vm_for(&seg, &VmConfig::default());
    let mut jit = NativeJit::new(small_arena(), &vm).unwrap();
    jit.tr.ts.keep_log = true;
    jit.compile(&mut vm.code, 0).unwrap();
    let l = jit.tr.ts.log.iter().find(|l| l.op == Opcode::AndInt).unwrap();
    assert_eq!(jit.tr.emitter.arena.bytes(l.start, l.end), [0x49, 0x23, 0x06]);
}

#[test]
fn sled_slides_into_compile_trampoline() {
    let seg = assemble("STOP").unwrap();
    let vm = vm_for(&seg, &VmConfig::default());
    let jit = NativeJit::new(small_arena(), &vm).unwrap();
    let e = &jit.tr.emitter;
    let end = e.code_end();
    assert!(e.arena.bytes(end, end + NUM_OPCODES as i64).iter().all(|&b| b == 0x90));
    assert_eq!(e.stubs.compile_trampoline, end + NUM_OPCODES as i64);
    // mov rbx,rax; mov rdi,rdx; mov rsi,rbp; call [rip+..]; xchg rax,rbx; jmp rbx
    let t = e.arena.bytes(e.stubs.compile_trampoline, e.arena.base() + e.arena.len() as i64);
    assert_eq!(&t[..9], [0x48, 0x89, 0xc3, 0x48, 0x89, 0xd7, 0x48, 0x89, 0xee]);
    assert_eq!(&t[9..11], [0xff, 0x15]);
    assert_eq!(&t[15..], [0x48, 0x87, 0xd8, 0xff, 0xe3]);
}

#[test]
fn closure_compiled_on_first_touch() {
    let src = "CONSTINT 7\nPUSH\nCLOSURE 0, f\nAPPLY 1\nSTOP\nf: ACC 0\nOFFSETINT 1\nRETURN 1";
    let seg = assemble(src).unwrap();
    let mut vm = vm_for(&seg, &VmConfig::default());
    let mut jit = NativeJit::new(small_arena(), &vm).unwrap();
    jit.compile(&mut vm.code, 0).unwrap();
    assert!(vm.code[9] >= 0);
    assert_eq!(jit.run(&mut vm, 0).unwrap(), Exit::Stop);
    assert_eq!(vm.accu, Value::of_int(8));
    assert_eq!(jit.sled_entries, 1);
    assert_eq!(jit.lookup_native(&vm.code, 9), Some(jit.tr.emitter.code_end() + vm.code[9] as i64));
}

#[test]
fn accu_survives_compile_trampoline() {
    let src = "PUSHTRAP h\nCONSTINT 12345\nRAISE\nh: OFFSETINT 1\nSTOP";
    let seg = assemble(src).unwrap();
    let mut vm = vm_for(&seg, &VmConfig::default());
    let mut jit = NativeJit::new(small_arena(), &vm).unwrap();
    assert_eq!(jit.run(&mut vm, 0).unwrap(), Exit::Stop);
    assert_eq!(vm.accu, Value::of_int(12346));
    // Entry and handler.
    assert_eq!(jit.sled_entries, 2);
}

#[test]
fn partial_application_round_trips_extra_args() {
    let seg = lc("(let (f (fun (a b c) (+ a (* b c)))) (let (g (f 1)) (let (h (g 2)) (h 3))))");
    let cfg = VmConfig::default();
    let (e1, v1) = interp(&seg, &cfg);
    let (e2, v2, _) = native(&seg, small_arena(), &cfg);
    assert_eq!((e1, v1.accu), (e2, v2.accu));
    assert_eq!(v2.accu, Value::of_int(7));
    assert_eq!(v2.extra_args, 0);
}

#[test]
fn makeblock_collects_when_minor_heap_is_full() {
    let seg = lc(
        "(let (acc (block 0 0 0)) (seq (for i 1 5000 (setfield acc 0 (block 0 i (field acc 0)))) (field (field acc 0) 0)))",
    );
    let mut cfg = VmConfig::default();
    cfg.heap.minor_bytes = 4096;
    let (e1, v1) = interp(&seg, &cfg);
    let (e2, v2, _) = native(&seg, small_arena(), &cfg);
    assert_eq!(e1, Exit::Stop);
    assert_eq!((e1, v1.accu), (e2, v2.accu));
    assert_eq!(v2.accu, Value::of_int(5000));
    assert!(v2.heap_stats().minor_collections > 10);
    assert_eq!(v1.heap_stats().minor_collections, v2.heap_stats().minor_collections);
}

#[test]
fn print_int_through_ccall() {
    let seg = assemble(".prim print_int\nCONSTINT 42\nC_CALL 0, 1\nSTOP").unwrap();
    let (exit, vm, _) = native(&seg, small_arena(), &VmConfig::default());
    assert_eq!(exit, Exit::Stop);
    assert_eq!(vm.out, b"42");
    assert_eq!(vm.accu, Value::UNIT);
}

#[test]
fn five_argument_primitive() {
    let mut reg = Registry::builtins();
    reg.register("echo5", 5, |_, a| {
        Ok(Value::of_int(a.iter().enumerate().map(|(i, v)| v.as_int() * 10i64.pow(i as u32)).sum()))
    });
    let seg = assemble(
        ".prim echo5\nCONSTINT 5\nPUSH\nCONSTINT 4\nPUSH\nCONSTINT 3\nPUSH\nCONSTINT 2\nPUSH\nCONSTINT 1\nC_CALL 0, 5\nSTOP",
    )
    .unwrap();
    let mut vm = Vm::new(&seg, &reg, &VmConfig::default()).unwrap();
    let mut jit = NativeJit::new(small_arena(), &vm).unwrap();
    assert_eq!(jit.run(&mut vm, 0).unwrap(), Exit::Stop);
    assert_eq!(vm.accu, Value::of_int(54321));
    assert_eq!(vm.sp, vm.stack_len());
}

#[test]
fn allocating_primitive_keeps_young_ptr_coherent() {
    // Each float_of_int allocates inside the primitive; the inline MAKEBLOCK
    // after it must bump from the reloaded cursor.
    let seg = lc("(let (r (block 0 0)) (seq (for i 1 3000 (setfield r 0 (block 0 (prim caml_float_of_int i) (field r 0)))) (prim caml_int_of_float (field (field r 0) 0))))");
    let mut cfg = VmConfig::default();
    cfg.heap.minor_bytes = 8192;
    let (e1, v1) = interp(&seg, &cfg);
    let (e2, v2, _) = native(&seg, small_arena(), &cfg);
    assert_eq!((e1, v1.accu), (e2, v2.accu));
    assert_eq!(v2.accu, Value::of_int(3000));
    assert_eq!(v1.heap_stats().minor_collections, v2.heap_stats().minor_collections);
}

fn random_double(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..10) {
        0 => [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN, f64::MIN_POSITIVE / 4.0][rng.gen_range(0..6)],
        1..=3 => f64::from_bits(rng.gen()),
        _ => rng.gen_range(-1e6..1e6),
    }
}

#[test]
fn inline_float_ops_match_primitives_bit_for_bit() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for name in ["caml_add_float", "caml_sub_float", "caml_mul_float", "caml_div_float", "caml_eq_float", "caml_lt_float", "caml_le_float"] {
        let seg = assemble(&format!(".prim {name}\nACC 1\nPUSH\nACC 1\nC_CALL 0, 2\nSTOP")).unwrap();
        let cfg = VmConfig::default();
        let mut a = vm_for(&seg, &cfg);
        let mut b = vm_for(&seg, &cfg);
        let mut jit = NativeJit::new(small_arena(), &b).unwrap();
        jit.compile(&mut b.code, 0).unwrap();
        for _ in 0..10_000 / 7 + 1 {
            let (x, y) = (random_double(&mut rng), random_double(&mut rng));
            for vm in [&mut a, &mut b] {
                vm.sp = vm.stack_len() - 2;
                let fx = vm.heap.alloc_float(x, &mut ()).unwrap();
                let fy = vm.heap.alloc_float(y, &mut [fx]).unwrap();
                vm.stack[vm.sp] = fy;
                vm.stack[vm.sp + 1] = fx;
            }
            assert_eq!(a.run_switch(0), Exit::Stop);
            assert_eq!(jit.run(&mut b, 0).unwrap(), Exit::Stop);
            if a.accu.is_int() {
                assert_eq!(a.accu, b.accu, "{name} {x} {y}");
            } else {
                let (ra, rb) = unsafe { (a.accu.double(), b.accu.double()) };
                assert_eq!(ra.to_bits(), rb.to_bits(), "{name} {x} {y}");
            }
        }
    }
}

#[test]
fn float_inline_emits_sse() {
    let seg = assemble(".prim caml_add_float\nACC 1\nPUSH\nACC 1\nC_CALL 0, 2\nSTOP").unwrap();
    let calls = |float_inline| {
        let mut vm = vm_for(&seg, &VmConfig::default());
        let mut jit = NativeJit::new(JitOptions { float_inline, ..small_arena() }, &vm).unwrap();
        jit.tr.ts.keep_log = true;
        jit.compile(&mut vm.code, 0).unwrap();
        let l = jit.tr.ts.log.iter().find(|l| l.op == Opcode::CCall).unwrap().clone();
        jit.tr.emitter.arena.bytes(l.start, l.end).windows(3).any(|w| w == [0xf2, 0x0f, 0x58])
    };
    assert!(calls(true));
    assert!(!calls(false));
}

#[test]
fn wx_mode_runs() {
    let seg = lc("(letrec ((fib (fun (n) (if (< n 2) n (+ (fib (- n 1)) (fib (- n 2))))))) (fib 15))");
    let (exit, vm, _) = native(&seg, JitOptions { wx: true, ..small_arena() }, &VmConfig::default());
    assert_eq!((exit, vm.accu), (Exit::Stop, Value::of_int(610)));
}

#[test]
fn arena_exhaustion_is_reported() {
    let src = "CONSTINT 1\n".repeat(2000) + "STOP";
    let seg = assemble(&src).unwrap();
    let mut vm = vm_for(&seg, &VmConfig::default());
    let mut jit = NativeJit::new(JitOptions { arena_size: 4096, ..JitOptions::default() }, &vm).unwrap();
    assert_eq!(jit.run(&mut vm, 0), Err(JitError::ArenaExhausted));
}

#[test]
fn uncaught_exception_and_division_by_zero() {
    let seg = lc("(/ 1 0)");
    let cfg = VmConfig::default();
    let (e1, _) = interp(&seg, &cfg);
    let (e2, _, _) = native(&seg, small_arena(), &cfg);
    assert!(matches!(e1, Exit::Uncaught(_)));
    assert!(matches!(e2, Exit::Uncaught(_)));
}

#[test]
fn every_call_site_is_counted() {
    let seg = lc("(letrec ((f (fun (n) (if (< n 1) 0 (+ 1 (f (- n 1))))))) (f 10))");
    let (_, _, jit) = native(&seg, small_arena(), &VmConfig::default());
    assert!(jit.tr.emitter.aligned_calls > 0);
}
