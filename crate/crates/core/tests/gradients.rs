mod common;

use common::{check_depth_loss, check_regularizer, check_render, Regularizer, MAX_REL_ERROR};

fn assert_all(name: &str, f: impl Fn(u64) -> f64) {
    for seed in 0..4 {
        let err = f(seed);
        assert!(err < MAX_REL_ERROR, "{name}, seed {seed}: relative error {err:e}");
    }
}

#[test]
fn renderer_matches_finite_differences() {
    assert_all("renderer", |s| check_render(s, false));
}

#[test]
fn constrained_renderer_matches_finite_differences() {
    assert_all("constrained renderer", |s| check_render(s, true));
}

#[test]
fn depth_loss_matches_finite_differences() {
    assert_all("depth loss", check_depth_loss);
}

#[test]
fn entropy_matches_finite_differences() {
    assert_all("entropy", |s| check_regularizer(s, Regularizer::Entropy));
}

#[test]
fn orientation_matches_finite_differences() {
    assert_all("orientation", |s| check_regularizer(s, Regularizer::Orientation));
}

#[test]
fn smoothness_matches_finite_differences() {
    assert_all("smoothness", |s| check_regularizer(s, Regularizer::Smoothness));
}
