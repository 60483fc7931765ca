mod common;

use common::checks::{self, Named};

const OP_TOL: f64 = 1e-5;

fn assert_within(errors: Named) {
    for (name, e) in errors {
        assert!(e < OP_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn matmul_both_layouts() {
    assert_within(checks::matmul());
}

#[test]
fn rms_norm_input_and_gain() {
    assert_within(checks::rms_norm());
}

#[test]
fn rope_add_broadcast_embedding() {
    assert_within(checks::rope_add_broadcast_embedding());
}

#[test]
fn attention_gqa_causal_and_full() {
    assert_within(checks::attention());
}

#[test]
fn silu_mul_and_cross_entropy() {
    assert_within(checks::silu_mul_and_cross_entropy());
}

#[test]
fn kl_and_free_bits() {
    assert_within(checks::kl_and_free_bits());
}

#[test]
fn binary_mapper_gradient_is_dg_dl() {
    assert_within(checks::binary_mapper());
}

#[test]
fn block_with_separate_kv_input() {
    assert_within(checks::block_with_separate_kv());
}

#[test]
fn full_train_loss_with_frozen_sampling() {
    let e = checks::full_model_relative_error();
    assert!(e < 1e-4, "full model relative error {e}");
}
