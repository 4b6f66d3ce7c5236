mod common;

use std::time::Instant;

use common::{eig_suite, gradient_suite, pearson_suite};

#[test]
fn eigensolver_residual_orthogonality_and_trace() {
    let r = eig_suite(1);
    assert_eq!(r.matrices, 100);
    assert!(r.max_residual <= 1e-8, "residual {:e}", r.max_residual);
    assert!(r.max_orthogonality <= 1e-8, "orthogonality {:e}", r.max_orthogonality);
    assert!(r.max_trace_rel <= 1e-6, "trace {:e}", r.max_trace_rel);
}

#[test]
fn pearson_matches_direct_and_exact_formulas() {
    let r = pearson_suite(2);
    assert_eq!(r.pairs, 1000);
    assert!(r.max_direct_error <= 1e-12, "direct {:e}", r.max_direct_error);
    assert!(r.max_exact_error <= 1e-12, "exact {:e}", r.max_exact_error);
}

#[test]
fn backprop_matches_central_differences() {
    let start = Instant::now();
    let r = gradient_suite(3);
    for (name, n, rel) in &r.blocks {
        println!("{name:12} {n:4} entries  rel {rel:.2e}");
    }
    assert_eq!(r.blocks.len(), 10);
    assert!(r.worst() <= 1e-4, "worst relative error {:e}", r.worst());
    println!("gradient check took {:?}", start.elapsed());
}
