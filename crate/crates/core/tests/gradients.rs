use poe_core::oracle::{loss_suite, op_suite, GradCase, SUITE_TOL};

fn run(cases: Vec<GradCase>) {
    let mut failures = Vec::new();
    for case in cases {
        let (err, seed) = case.worst(0..50).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        println!("{:<24} max rel err {err:.2e} (seed {seed})", case.name);
        if err >= SUITE_TOL {
            failures.push(case.name);
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn every_op_matches_central_differences() {
    run(op_suite());
}

#[test]
fn every_loss_matches_central_differences() {
    run(loss_suite());
}
