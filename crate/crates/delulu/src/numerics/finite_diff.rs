//! Central finite differences, the independent gradient oracle.

use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// Central-difference gradient of a scalar function:
/// (f(x + h·e_i) - f(x - h·e_i)) / 2h per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0);
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max relative error between two gradients: |a-b| / max(1, |b|).
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / f64::max(1.0, y.abs()))
        .fold(0.0, f64::max)
}
