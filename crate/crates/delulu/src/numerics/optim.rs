//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{DeluluError, Result};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    /// First/second moment accumulators, one pair per parameter, in the
    /// caller's fixed parameter order.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    /// Fresh state with the paper-default hyperparameters
    /// (beta1 0.9, beta2 0.98, weight decay 0.01).
    pub fn new(param_sizes: &[usize]) -> Self {
        OptimizerState {
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            epsilon: 1e-8,
            moments: param_sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }
}

/// One AdamW update over a fixed-order parameter list. Weight decay is
/// decoupled (applied to the parameters directly) and multiplied by lr,
/// so lr = 0 leaves parameters untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(DeluluError::Contract(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    if lr < 0.0 {
        return Err(DeluluError::Contract(format!("adamw_step: negative lr {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        if p.shape() != g.shape() {
            return Err(DeluluError::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gd[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + state.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Scale all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm. Returns the pre-clip global norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn lr_zero_is_a_no_op() {
        let mut p = scalar_param(1.5);
        let g = Tensor::scalar(2.0);
        let mut st = OptimizerState::new(&[1]);
        adamw_step(&mut [&mut p], &[g], &mut st, 0.0).unwrap();
        assert_eq!(p.item(), 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        // From zero state with grad 1: m_hat = 1, v_hat = 1, so the update
        // is -lr/(1 + eps), i.e. about -lr.
        let mut p = scalar_param(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(&[1]);
        let lr = 1e-3;
        adamw_step(&mut [&mut p], &[g], &mut st, lr).unwrap();
        assert!((p.item() + lr).abs() < 1e-9 * lr + 1e-11, "got {}", p.item());
    }

    #[test]
    fn decay_shrinks_params_monotonically_with_zero_grads() {
        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(&[1]);
        let mut prev = 2.0;
        for _ in 0..10 {
            let g = Tensor::scalar(0.0);
            adamw_step(&mut [&mut p], &[g], &mut st, 0.1).unwrap();
            assert!(p.item() < prev && p.item() > 0.0);
            prev = p.item();
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(&[2]);
        assert!(adamw_step(&mut [&mut p], &[g], &mut st, 0.1).is_err());
    }

    #[test]
    fn clip_examples() {
        // norm 5 with max 10: unchanged
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        // norm 20 with max 10: halved
        let mut g = vec![Tensor::vector(vec![12.0, 16.0])];
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g[0].data(), &[6.0, 8.0]);
        // [30, 40] (norm 50) with max 10 -> [6, 8]
        let mut g = vec![Tensor::vector(vec![30.0, 40.0])];
        clip_global_norm(&mut g, 10.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
        assert!((g[0].data()[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut g1 = vec![Tensor::vector(vec![30.0, 40.0])];
        clip_global_norm(&mut g1, 10.0);
        let mut g2 = g1.clone();
        clip_global_norm(&mut g2, 10.0);
        assert_eq!(g1[0].data(), g2[0].data());
        let post: f64 = g2.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        assert!(post <= 10.0 + 1e-9);
    }
}
