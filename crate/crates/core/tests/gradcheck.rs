use std::collections::BTreeSet;

use wavediff::autograd::OP_NAMES;
use wavediff::gradcheck::{model_cases, op_cases, run_case, GradcheckOptions};

#[test]
fn every_registered_op_is_covered() {
    let mut seen = BTreeSet::new();
    for case in op_cases(0) {
        seen.extend(case.ops().unwrap());
    }
    let missing: Vec<_> = OP_NAMES.iter().filter(|n| !seen.contains(*n)).collect();
    assert!(missing.is_empty(), "ops without a gradcheck case: {missing:?}");
}

#[test]
fn every_op_passes() {
    let opts = GradcheckOptions::default();
    for case in op_cases(0) {
        let rep = run_case(&case, &opts).unwrap();
        assert!(rep.passed(), "{}: max rel err {:e}", case.name, rep.max_rel_err());
    }
}

#[test]
fn full_networks_pass() {
    let opts = GradcheckOptions {
        coords_per_tensor: 6,
        ..GradcheckOptions::default()
    };
    for case in model_cases(0).unwrap() {
        let rep = run_case(&case, &opts).unwrap();
        let worst = rep
            .checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        assert!(rep.passed(), "{}: {} at {:e}", case.name, worst.name, worst.max_rel_err);
    }
}
