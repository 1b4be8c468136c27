//! Benchmark results checked against direct Rust computations of the same
//! algorithms.

use zvm_core::engine::{run, EngineKind, RunConfig};
use zvm_core::observe::Outcome;
use zvm_core::prims::Registry;
use zvm_core::programs::benchmark;

const MASK: i64 = (1 << 30) - 1;

fn lcg(s: i64) -> i64 {
    (s * 1103515245 + 12345) & MASK
}

fn checksum(xs: &[i64]) -> i64 {
    xs.iter().fold(0, |acc, x| (acc * 31 + x) & MASK)
}

fn fib(n: i64) -> i64 {
    let (mut a, mut b) = (0, 1);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    a
}

fn tak(x: i64, y: i64, z: i64) -> i64 {
    if y < x {
        tak(tak(x - 1, y, z), tak(y - 1, z, x), tak(z - 1, x, y))
    } else {
        z
    }
}

fn quicksort() -> i64 {
    let mut s = 42;
    let mut a: Vec<i64> = (0..100_000)
        .map(|_| {
            s = lcg(s);
            s
        })
        .collect();
    a.sort_unstable();
    checksum(&a)
}

fn list_sort() -> i64 {
    let mut s = 7;
    let mut a: Vec<i64> = (0..20_000)
        .map(|_| {
            s = lcg(s);
            s % 100_000
        })
        .collect();
    a.sort_unstable();
    checksum(&a)
}

fn mandelbrot() -> i64 {
    let mut count = 0;
    for py in 0..80 {
        for px in 0..120 {
            let cr = px as f64 * 0.025 - 2.0;
            let ci = py as f64 * 0.025 - 1.0;
            let (mut x, mut y, mut i) = (0.0f64, 0.0f64, 0);
            while i < 50 && x * x + y * y <= 4.0 {
                (x, y) = (x * x - y * y + cr, 2.0 * (x * y) + ci);
                i += 1;
            }
            count += (i == 50) as i64;
        }
    }
    count
}

fn nested_exception() -> i64 {
    // 7 at the bottom, incremented by each of the 20 handlers, 2000 times.
    2000 * (7 + 20)
}

fn check(name: &str, expected: i64) {
    let seg = benchmark(name).expect("benchmark").segment().expect("compile");
    for e in EngineKind::available() {
        let r = run(&seg, &Registry::builtins(), &RunConfig::new(e)).expect("run");
        assert_eq!(r.result.outcome, Outcome::Value(format!("int {expected}")), "{name} on {e}");
    }
}

#[test]
fn fib_30() {
    assert_eq!(fib(10), 55);
    check("fib", fib(30));
}

#[test]
fn tak_24_16_8() {
    check("tak", tak(24, 16, 8));
}

#[test]
fn quicksort_checksum() {
    check("quicksort", quicksort());
}

#[test]
fn list_sort_checksum() {
    check("list-sort", list_sort());
}

#[test]
fn mandelbrot_count() {
    check("float-loop", mandelbrot());
}

#[test]
fn nested_exception_sum() {
    check("nested-exception", nested_exception());
}
