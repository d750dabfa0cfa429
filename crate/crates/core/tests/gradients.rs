mod common;

use common::{COMPOSITES, SEEDS, TOLERANCE};

fn check(name: &str, f: fn(u64) -> lingagg::kernels::GradCheckReport) {
    for seed in 0..SEEDS {
        let report = f(seed);
        assert!(report.checked > 0);
        assert!(
            report.max_rel_error <= TOLERANCE,
            "{name} seed {seed}: relative error {:.3e} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    check(COMPOSITES[0].0, COMPOSITES[0].1);
}

#[test]
fn probe_matches_finite_differences() {
    check(COMPOSITES[1].0, COMPOSITES[1].1);
}

#[test]
fn weighted_sum_matches_finite_differences() {
    check(COMPOSITES[2].0, COMPOSITES[2].1);
}

#[test]
fn attention_matches_finite_differences() {
    check(COMPOSITES[3].0, COMPOSITES[3].1);
}
