mod common;

use common::suite::{self, Cases};
use common::TOL;

fn assert_all(cases: Cases) {
    for (name, err) in cases {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn elementwise_and_linear_ops() {
    assert_all(suite::elementwise_and_linear_ops());
}

#[test]
fn row_layout_ops() {
    assert_all(suite::row_layout_ops());
}

#[test]
fn efficient_attention_self_and_cross() {
    assert_all(suite::efficient_attention_self_and_cross());
}

#[test]
fn softmax_attention_with_padding() {
    assert_all(suite::softmax_attention_with_padding());
}

#[test]
fn two_layer_perceptron() {
    assert_all(suite::two_layer_perceptron());
}

#[test]
fn toy_denoiser_parameters_and_input() {
    assert_all(suite::toy_denoiser_parameters_and_input());
}
