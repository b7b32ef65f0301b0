//! Finite-difference gradient checks: every differentiable op and loss is
//! compared against central differences on random inputs.

mod common;

use common::{fd_check, find_case};

const INSTANCES: u64 = 20;

macro_rules! gradcheck {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                fd_check(&find_case(stringify!($name)), INSTANCES);
            }
        )*
    };
}

gradcheck!(
    add_broadcast,
    mul_broadcast,
    scale,
    sub,
    matmul,
    matmul_batched,
    matmul_shared_b,
    matmul_transb,
    linear,
    transpose,
    transpose_inner,
    reshape,
    slice,
    concat,
    gather,
    layer_norm,
    gelu,
    tanh,
    softmax,
    dropout,
    cross_entropy,
    cross_entropy_weighted,
    bce_with_logits,
    mse,
    kl_div_both_sides,
    composite_block,
);

#[test]
fn every_op_case_has_a_named_test() {
    // keep the macro list above in sync with the case table
    assert_eq!(common::op_cases().len(), 26);
}
