//! Reverse-mode differentiation over dense f64 arrays, plus Adam.
//!
//! The design is deliberately small: a dynamic graph is rebuilt for every
//! batch, ops cover exactly what the two sequence architectures need, and
//! everything runs in double precision so finite-difference checks can be
//! tight. Graphs are confined to one thread; separate graphs are
//! independent.

mod adam;
mod graph;
pub(crate) mod tensor;

pub mod gradcheck;

pub use adam::{adam_step, AdamHyper, AdamState, ParameterSet};
pub use graph::{Activation, AutodiffError, Graph, Mask, NodeId};
pub use tensor::{matmul, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.hadamard(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(1, 4));
        let y = g.softmax_rows(x);
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_fill_zeroes_softmax_slots() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 3));
        let mask = Arc::new(Mask::new(1, 3, vec![false, true, false]));
        let filled = g.masked_fill(x, mask, f64::NEG_INFINITY).unwrap();
        let p = g.softmax_rows(filled);
        for r in 0..2 {
            assert_eq!(g.value(p).at(r, 1), 0.0);
            assert!((g.value(p).at(r, 0) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_with_identity_is_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::from_vec(2, 2, vec![1., 0., 0., 1.]));
        let a = g.leaf(Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        // d/dlogits of -log softmax(logits)[k] is softmax(logits) - onehot(k).
        let logits = vec![0.2, -1.3, 0.7, 0.05];
        let k = 2usize;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 4, logits.clone()));
        let lp = g.log_softmax_rows(x);
        let picked = g.pick(lp, Arc::new(vec![k])).unwrap();
        let loss = g.scale(picked, -1.0);
        let root = g.mean_all(loss);
        g.backward(root).unwrap();
        let mut probs = logits.clone();
        crate::autodiff::tensor::softmax_rows_inplace(&mut probs, 4);
        let grad = g.grad(x).unwrap();
        for c in 0..4 {
            let expect = probs[c] - if c == k { 1.0 } else { 0.0 };
            assert!((grad.at(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_gradient_off_the_root_path() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let dangling = g.tanh(x);
        let y = g.hadamard(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(dangling).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::from_vec(2, 2, vec![0.3, -0.7, 1.1, 0.2]));
            let b = g.leaf(Tensor::from_vec(2, 2, vec![0.5, 0.4, -0.1, 0.9]));
            let c = g.matmul(a, b).unwrap();
            let d = g.tanh(c);
            let e = g.hadamard(d, d).unwrap();
            let root = g.mean_all(e);
            g.backward(root).unwrap();
            (
                g.grad(a).unwrap().data().to_vec(),
                g.grad(b).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.hadamard(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), AutodiffError::BackwardTwice);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_rejected_at_construction() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(2, 2));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.slice_cols(a, 2..5).is_err());
    }

    #[test]
    fn attention_rows_are_normalized_and_causal() {
        // Degenerate single-head attention with all-equal keys: uniform
        // weights over the allowed (non-future) positions.
        let t = 4;
        let mut g = Graph::new();
        let q = g.leaf(Tensor::from_vec(t, 2, vec![0.3; t * 2]));
        let k = g.leaf(Tensor::from_vec(t, 2, vec![0.3; t * 2]));
        let s = g.attn_scores(q, k, 1, t, 1.0 / 2f64.sqrt()).unwrap();
        let masked = g
            .masked_fill(s, Arc::new(Mask::causal(t)), f64::NEG_INFINITY)
            .unwrap();
        let p = g.softmax_rows(masked);
        let probs = g.value(p);
        assert!((probs.at(0, 0) - 1.0).abs() < 1e-12);
        for row in 0..t {
            let sum: f64 = probs.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for col in row + 1..t {
                assert_eq!(probs.at(row, col), 0.0);
            }
            for col in 0..=row {
                assert!((probs.at(row, col) - 1.0 / (row + 1) as f64).abs() < 1e-12);
            }
        }
    }
}
