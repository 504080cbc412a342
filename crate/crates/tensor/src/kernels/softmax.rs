use crate::{Element, Result, Shape, Tensor, TensorError};

/// Softmax along the last axis, with the row max subtracted first.
pub fn softmax_lastdim<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.shape().last();
    let mut out = vec![E::zero(); x.numel()];
    for (src, dst) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = 0.0f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += d.to_f64();
        }
        let inv = E::from_f64(1.0 / sum);
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

/// `dx = y * (dy - sum(dy * y))` per row, given the softmax output `y`.
pub fn softmax_backward<E: Element>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    if y.dims() != grad_out.dims() {
        return Err(TensorError::shape(
            "softmax_backward",
            format!("{:?} vs {:?}", y.dims(), grad_out.dims()),
        ));
    }
    let n = y.shape().last();
    let mut dx = vec![E::zero(); y.numel()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(n)
        .zip(grad_out.data().chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Ok(Tensor::from_parts(y.shape().clone(), dx))
}

/// Mean softmax cross-entropy of `[B, K]` logits against class indices.
/// Returns the scalar loss and the row softmax (needed for the gradient).
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<(Tensor<E>, Tensor<E>)> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(TensorError::shape(
            "cross_entropy",
            format!("logits {d:?} with {} labels", labels.len()),
        ));
    }
    let k = d[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::param(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let probs = softmax_lastdim(logits)?;
    let mut loss = 0.0f64;
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        loss -= row[label].to_f64().ln();
    }
    let loss = E::from_f64(loss / labels.len() as f64);
    Ok((Tensor::from_parts(Shape::scalar(), vec![loss]), probs))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits, scaled by the upstream scalar.
pub fn cross_entropy_backward<E: Element>(probs: &Tensor<E>, labels: &[usize], upstream: E) -> Tensor<E> {
    let k = probs.shape().last();
    let scale = upstream / E::from_f64(labels.len() as f64);
    let mut g = probs.to_vec();
    for (row, &label) in g.chunks_exact_mut(k).zip(labels) {
        row[label] -= E::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_parts(probs.shape().clone(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_on_zeros() {
        let x = Tensor::<f32>::zeros(vec![4]).unwrap();
        assert_eq!(softmax_lastdim(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn large_equal_values_do_not_overflow() {
        let x = Tensor::<f32>::from_vec(vec![2], vec![1e30, 1e30]).unwrap();
        assert_eq!(softmax_lastdim(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let x = Tensor::<f64>::zeros(vec![2, 4]).unwrap();
        let (loss, _) = cross_entropy(&x, &[0, 3]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&x, &[0, 4]).is_err());
    }
}
