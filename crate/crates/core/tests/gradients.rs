//! Central finite-difference checks of every differentiable graph op and of
//! the composed autoencoder loss.

mod common;

use dnae_core::autograd::Graph;
use dnae_core::tensor::Tensor;

const TOL: f64 = 1e-5;
// single ops are held to the tighter bound
const OP_TOL: f64 = 1e-6;

#[test]
fn every_op_matches_finite_differences() {
    for (k, c) in common::op_cases().iter().enumerate() {
        let tol = if c.name == "conv_relu_dense_mse" { TOL } else { OP_TOL };
        let err = common::op_error(c, k as u64 + 1);
        assert!(err < tol, "{}: max relative error {err:.3e}", c.name);
    }
}

#[test]
fn composed_autoencoder_loss() {
    let err = common::autoencoder_error();
    assert!(err < TOL, "autoencoder: max relative error {err:.3e}");
}

#[test]
fn pooling_hand_value() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.pool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
}

#[test]
fn dense_hand_value() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let w = g.leaf(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    let b = g.leaf(Tensor::from_vec(vec![1.0, 0.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 2.0]);
}
