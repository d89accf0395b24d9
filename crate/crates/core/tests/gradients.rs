use mfcl_core::gradcheck::{run_suite, CheckOptions, TOLERANCE};

#[test]
fn every_op_passes_finite_differences() {
    let reports = run_suite(&CheckOptions::default()).unwrap();
    for r in &reports {
        println!("{:<28} {:.3e}  {}", r.op, r.max_rel_err, r.shapes.join("; "));
    }
    for r in &reports {
        assert!(r.shapes.len() >= 3, "{} checked on {} shapes", r.op, r.shapes.len());
        assert!(r.max_rel_err < TOLERANCE, "{}: {}", r.op, r.max_rel_err);
    }
}

