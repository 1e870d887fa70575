//! Dense-tensor engine: reverse-mode autodiff, AdamW, and the LR schedule.

pub mod finite_diff;
pub mod graph;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use finite_diff::{finite_diff_grad, max_rel_err};
pub use graph::{Graph, NodeId};
pub use optim::{adamw_step, clip_global_norm, OptimizerState};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0; 4]), false);
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![7.5; 6]), false);
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = rand_tensor(vec![3, 3], 11);
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let i = g.input(eye, false);
        let an = g.input(a.clone(), false);
        let y = g.matmul(i, an).unwrap();
        assert_eq!(g.value(y).data(), a.data());
    }

    #[test]
    fn square_gradient_analytic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.square(x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.leaf_grad(&grads, x).item(), 6.0);
    }

    #[test]
    fn mean_pool_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(rand_tensor(vec![5, 3], 3).with_grad(), true);
        let pooled = g.mean_pool(x).unwrap();
        let loss = g.sum(pooled).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in g.leaf_grad(&grads, x).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0), true);
        let unused = g.input(Tensor::vector(vec![1.0, 1.0]), true);
        let y = g.square(x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(g.leaf_grad(&grads, unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x + x) -> grad 2 everywhere
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, -2.0]), true);
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(g.leaf_grad(&grads, x).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let d = g.detach(x).unwrap();
        let y = g.square(d).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.leaf_grad(&grads, x).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]), false);
        let b = g.input(Tensor::zeros(vec![2, 3]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    /// Gradcheck harness: builds a scalar loss from one op applied to x and
    /// compares autodiff against central differences.
    fn gradcheck<F>(shape: Vec<usize>, seed: u64, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let x = rand_tensor(shape, seed);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), true);
        let loss = build(&mut g, xn);
        let grads = g.backward(loss).unwrap();
        let auto = g.leaf_grad(&grads, xn);
        let fd = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let xn = g.input(t.clone(), true);
                let loss = build(&mut g, xn);
                Ok(g.value(loss).item())
            },
            &x,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&auto, &fd);
        assert!(err < 1e-4, "gradcheck failed: rel err {err}");
    }

    /// Weights a loss so different coordinates get distinct gradients.
    fn weighted_sum(g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.value(x).numel();
        let w = Tensor::new(
            g.value(x).shape().to_vec(),
            (0..n).map(|i| 0.3 + 0.11 * i as f64).collect(),
        )
        .unwrap();
        let shaped = g.value(x).shape().to_vec();
        let wn = g.constant(w);
        // elementwise weight via affine trick: sum(square(x + w)) keeps it simple
        let _ = shaped;
        let s = g.add(x, wn).unwrap();
        let sq = g.square(s).unwrap();
        g.sum(sq).unwrap()
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        gradcheck(vec![3, 4], 1, |g, x| {
            let y = g.gelu(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![2, 5], 2, |g, x| {
            let y = g.square(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![7], 3, |g, x| {
            let y = g.scale(x, -1.7).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_normalization_ops() {
        gradcheck(vec![3, 6], 4, |g, x| {
            let y = g.layer_norm(x, 1e-5).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![4, 5], 5, |g, x| {
            let y = g.l2_normalize(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![2, 6], 6, |g, x| {
            let y = g.softmax(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![2, 6], 7, |g, x| {
            let y = g.log_softmax(x).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_matmul_both_sides() {
        let b = rand_tensor(vec![4, 3], 100);
        gradcheck(vec![2, 4], 8, |g, x| {
            let bn = g.constant(b.clone());
            let y = g.matmul(x, bn).unwrap();
            weighted_sum(g, y)
        });
        let a = rand_tensor(vec![2, 4], 101);
        gradcheck(vec![4, 3], 9, |g, x| {
            let an = g.constant(a.clone());
            let y = g.matmul(an, x).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_conv1d_both_sides() {
        let w = rand_tensor(vec![3, 2, 4], 102);
        gradcheck(vec![11, 2], 10, |g, x| {
            let wn = g.constant(w.clone());
            let y = g.conv1d(x, wn, 2).unwrap();
            weighted_sum(g, y)
        });
        let x = rand_tensor(vec![11, 2], 103);
        gradcheck(vec![3, 2, 4], 11, |g, w| {
            let xn = g.constant(x.clone());
            let y = g.conv1d(xn, w, 2).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        gradcheck(vec![3, 8], 12, |g, x| {
            let a = g.slice_cols(x, 1, 3).unwrap();
            let b = g.slice_cols(x, 4, 4).unwrap();
            let y = g.concat_cols(&[a, b]).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![4, 3], 13, |g, x| {
            let y = g.transpose(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![5, 3], 14, |g, x| {
            let y = g.mean_pool(x).unwrap();
            weighted_sum(g, y)
        });
        gradcheck(vec![4, 3], 15, |g, x| {
            let y = g.embedding_lookup(x, &[0, 2, 2, 1]).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_mask_and_bias_ops() {
        let v = rand_tensor(vec![4], 104);
        gradcheck(vec![5, 4], 16, |g, x| {
            let vn = g.constant(v.clone());
            let y = g.mask_rows(x, &[1, 3], vn).unwrap();
            weighted_sum(g, y)
        });
        // gradient w.r.t. the mask vector itself
        let x = rand_tensor(vec![5, 4], 105);
        gradcheck(vec![4], 17, |g, v| {
            let xn = g.constant(x.clone());
            let y = g.mask_rows(xn, &[0, 2], v).unwrap();
            weighted_sum(g, y)
        });
        let m = rand_tensor(vec![4, 3], 106);
        gradcheck(vec![3], 18, |g, b| {
            let mn = g.constant(m.clone());
            let y = g.add_bias(mn, b).unwrap();
            weighted_sum(g, y)
        });
        let gain = rand_tensor(vec![3], 107);
        let bias = rand_tensor(vec![3], 108);
        gradcheck(vec![4, 3], 19, |g, x| {
            let gn = g.constant(gain.clone());
            let bn = g.constant(bias.clone());
            let y = g.affine_cols(x, gn, bn).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_nll_masked_matches_softmax_ce() {
        let labels = vec![0, 1, 0];
        let rows = vec![0, 2];
        gradcheck(vec![3, 4], 20, |g, x| {
            let lp = g.log_softmax(x).unwrap();
            g.nll_masked(lp, &labels, &rows).unwrap()
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(rand_tensor(vec![6, 4], 55), true);
            let w = g.input(rand_tensor(vec![4, 4], 56), true);
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.layer_norm(h, 1e-5).unwrap();
            let loss = {
                let s = g.square(h).unwrap();
                g.sum(s).unwrap()
            };
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), g.leaf_grad(&grads, w).data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
