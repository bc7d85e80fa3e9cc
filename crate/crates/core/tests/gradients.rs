mod common;

use common::gradients as grad;

#[test]
fn conv2d() {
    grad::conv2d_gradients().unwrap();
    grad::conv2d_gradient_on_2x3x8x8().unwrap();
}

#[test]
fn linear() {
    grad::linear_gradients().unwrap();
}

#[test]
fn pooling_and_resampling() {
    grad::pooling_and_resampling_gradients().unwrap();
}

#[test]
fn concat_and_broadcast() {
    grad::concat_and_broadcast_gradients().unwrap();
}

#[test]
fn elementwise() {
    grad::elementwise_gradients().unwrap();
}

#[test]
fn softmax_and_reductions() {
    grad::softmax_and_reduction_gradients().unwrap();
}

#[test]
fn affine_grid() {
    grad::affine_grid_gradients().unwrap();
}

#[test]
fn grid_sample() {
    grad::grid_sample_gradients().unwrap();
}

#[test]
fn roi_pool() {
    grad::roi_pool_gradients().unwrap();
}

#[test]
fn composed_alignment_chain() {
    grad::composed_alignment_chain().unwrap();
}

#[test]
fn composite_loss_through_whole_network() {
    grad::end_to_end().unwrap();
}
