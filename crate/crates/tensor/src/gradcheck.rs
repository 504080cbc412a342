use crate::{Result, Tensor, TensorError};

/// Central-difference gradient of a scalar function at `x`.
///
/// `f` must return a one-element tensor; anything else is a contract error.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidParameter {
            op: "finite_diff_grad",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let mut scalar = |t: &Tensor<f64>| -> Result<f64> {
        let y = f(t)?;
        if y.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "finite_diff_grad needs a scalar function, got output shape {:?}",
                y.dims()
            )));
        }
        Ok(y.data()[0])
    };
    let mut grad = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let plus = scalar(&x.with_element(i, v + eps))?;
        let minus = scalar(&x.with_element(i, v - eps))?;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::from_vec(x.dims().to_vec(), grad)
}

/// `|a - b| / max(1, |a|, |b|)`, the error measure used for gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest [`relative_error`] over paired elements.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "max_relative_error shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
