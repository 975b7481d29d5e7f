mod common;

use common::checks;

#[test]
fn instructor_and_generator_gradients_are_isolated() {
    for seed in [1, 2] {
        let iso = checks::adversarial_isolation(seed);
        assert_eq!(iso.generator_leaks, 0);
        assert_eq!(iso.instructor_leaks, 0);
        assert!(iso.instructor_reached && iso.generator_reached);
    }
}

#[test]
fn minimax_at_half_scores_is_minus_two_ln_two() {
    let v = checks::minimax_at_half();
    assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-6, "{v}");
    assert!((v + 1.386294).abs() < 1e-6);
}

#[test]
fn stop_grad_freezes_only_the_score_path() {
    let s = checks::stop_grad(4);
    assert_eq!(s.score_path_tensors, 6);
    assert_eq!(s.score_path_nonzero, 0);
    assert!(s.other_fraction() >= 0.99, "{}", s.other_fraction());
}
