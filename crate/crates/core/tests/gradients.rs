use snn_core::gradcheck::{network_check, op_suite, surrogate_check};

const OP_ABS_TOL: f64 = 1e-6;
const NETWORK_REL_TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for seed in [0, 1, 2] {
        for r in op_suite(seed).unwrap() {
            println!("{:<20} n={:<4} abs={:.2e} rel={:.2e}", r.name, r.entries, r.max_abs_err, r.rel_err);
            assert!(r.entries > 0, "{} checked nothing", r.name);
            assert!(r.max_abs_err < OP_ABS_TOL, "{}: {:e}", r.name, r.max_abs_err);
        }
    }
}

#[test]
fn spike_backward_is_the_logistic_derivative() {
    for beta in [1.0, 3.0, 5.0] {
        let r = surrogate_check(beta, 7).unwrap();
        assert!(r.max_abs_err < 1e-12, "beta {beta}: {:e}", r.max_abs_err);
    }
}

#[test]
fn relaxed_network_gradients_match_end_to_end() {
    for seed in [0, 1] {
        for r in network_check(seed).unwrap() {
            println!("{:<12} n={:<4} abs={:.2e} rel={:.2e}", r.name, r.entries, r.max_abs_err, r.rel_err);
            assert!(r.rel_err < NETWORK_REL_TOL, "{}: {:e}", r.name, r.rel_err);
        }
    }
}
