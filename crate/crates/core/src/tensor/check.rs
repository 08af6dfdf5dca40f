//! Central-difference gradient oracle.

use super::{Result, Tensor, TensorError};

/// Central differences `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2·eps` for every element of `x`.
///
/// `f` must return a one-element tensor.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {eps}")));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let out = f(t)?;
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        Ok(out.data()[0])
    };
    eval(x)?;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}

/// `max |a − b| / max(|a|, |b|, floor)` over paired elements.
///
/// `floor` keeps exactly-zero gradients (e.g. a bias feeding batch norm)
/// from turning round-off into unit relative error.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "paired gradients differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
