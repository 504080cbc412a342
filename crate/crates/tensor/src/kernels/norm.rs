//! Batch normalisation over axis 1 of `[B, C, ...]` inputs.

use crate::{Element, Result, Shape, Tensor, TensorError};

struct Layout {
    batch: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of<E: Element>(x: &Tensor<E>, params: &[&Tensor<E>], eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(TensorError::param("batchnorm", format!("eps must be > 0, got {eps}")));
        }
        let d = x.dims();
        if d.len() < 2 {
            return Err(TensorError::shape(
                "batchnorm",
                format!("input needs a channel axis, got {d:?}"),
            ));
        }
        let channels = d[1];
        for p in params {
            if p.dims() != [channels] {
                return Err(TensorError::shape(
                    "batchnorm",
                    format!("parameter {:?} vs {channels} channels", p.dims()),
                ));
            }
        }
        Ok(Layout {
            batch: d[0],
            channels,
            inner: d[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.batch * self.inner
    }

    /// Visits every element of channel `c` in a fixed order.
    #[inline]
    fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let start = (b * self.channels + c) * self.inner;
            for i in start..start + self.inner {
                f(i);
            }
        }
    }
}

/// Output of a training-mode batch norm plus what backward needs.
#[derive(Clone, Debug)]
pub struct BatchNormTrain<E: Element> {
    pub output: Tensor<E>,
    /// Normalised input `(x - mean) / sqrt(var + eps)`.
    pub normalized: Tensor<E>,
    pub inv_std: Vec<E>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

impl<E: Element> BatchNormTrain<E> {
    /// Running statistics after one momentum step:
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance.
    pub fn updated_running(
        &self,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        momentum: f64,
    ) -> (Tensor<E>, Tensor<E>) {
        let n = self.count as f64;
        let unbias = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        let mean: Vec<E> = running_mean
            .data()
            .iter()
            .zip(&self.batch_mean)
            .map(|(&r, &m)| E::from_f64((1.0 - momentum) * r.to_f64() + momentum * m))
            .collect();
        let var: Vec<E> = running_var
            .data()
            .iter()
            .zip(&self.batch_var)
            .map(|(&r, &v)| E::from_f64((1.0 - momentum) * r.to_f64() + momentum * v * unbias))
            .collect();
        (
            Tensor::from_parts(running_mean.shape().clone(), mean),
            Tensor::from_parts(running_var.shape().clone(), var),
        )
    }
}

pub fn batchnorm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<BatchNormTrain<E>> {
    let l = Layout::of(x, &[gamma, beta], eps)?;
    let xd = x.data();
    let n = l.count() as f64;
    let mut out = vec![E::zero(); x.numel()];
    let mut xhat = vec![E::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(l.channels);
    let mut means = Vec::with_capacity(l.channels);
    let mut vars = Vec::with_capacity(l.channels);
    for c in 0..l.channels {
        let mut sum = 0.0f64;
        l.for_channel(c, |i| sum += xd[i].to_f64());
        let mean = sum / n;
        let mut sq = 0.0f64;
        l.for_channel(c, |i| sq += (xd[i].to_f64() - mean).powi(2));
        let var = sq / n;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        let (mean_e, istd_e) = (E::from_f64(mean), E::from_f64(istd));
        l.for_channel(c, |i| {
            let h = (xd[i] - mean_e) * istd_e;
            xhat[i] = h;
            out[i] = g * h + b;
        });
        inv_std.push(istd_e);
        means.push(mean);
        vars.push(var);
    }
    Ok(BatchNormTrain {
        output: Tensor::from_parts(x.shape().clone(), out),
        normalized: Tensor::from_parts(x.shape().clone(), xhat),
        inv_std,
        batch_mean: means,
        batch_var: vars,
        count: l.count(),
    })
}

/// Gradients `(dx, dgamma, dbeta)` of a training-mode batch norm.
pub fn batchnorm_train_backward<E: Element>(
    grad_out: &Tensor<E>,
    normalized: &Tensor<E>,
    gamma: &Tensor<E>,
    inv_std: &[E],
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let l = Layout::of(normalized, &[gamma], 1.0)?;
    let (gd, hd) = (grad_out.data(), normalized.data());
    let n = E::from_f64(l.count() as f64);
    let mut dx = vec![E::zero(); gd.len()];
    let mut dgamma = Vec::with_capacity(l.channels);
    let mut dbeta = Vec::with_capacity(l.channels);
    for c in 0..l.channels {
        let (mut sum_dy, mut sum_dy_h) = (E::zero(), E::zero());
        l.for_channel(c, |i| {
            sum_dy += gd[i];
            sum_dy_h += gd[i] * hd[i];
        });
        let k = gamma.data()[c] * inv_std[c] / n;
        l.for_channel(c, |i| dx[i] = k * (n * gd[i] - sum_dy - hd[i] * sum_dy_h));
        dgamma.push(sum_dy_h);
        dbeta.push(sum_dy);
    }
    let cshape = gamma.shape().clone();
    Ok((
        Tensor::from_parts(grad_out.shape().clone(), dx),
        Tensor::from_parts(cshape.clone(), dgamma),
        Tensor::from_parts(cshape, dbeta),
    ))
}

/// Inference-mode batch norm using running statistics only.
pub fn batchnorm_infer<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let l = Layout::of(x, &[gamma, beta, running_mean, running_var], eps)?;
    let xd = x.data();
    let mut out = vec![E::zero(); x.numel()];
    for c in 0..l.channels {
        let istd = E::from_f64(1.0 / (running_var.data()[c].to_f64() + eps).sqrt());
        let scale = gamma.data()[c] * istd;
        let (mean, b) = (running_mean.data()[c], beta.data()[c]);
        l.for_channel(c, |i| out[i] = (xd[i] - mean) * scale + b);
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batchnorm_infer`].
pub fn batchnorm_infer_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let l = Layout::of(x, &[gamma, running_mean, running_var], eps)?;
    let (gd, xd) = (grad_out.data(), x.data());
    let mut dx = vec![E::zero(); xd.len()];
    let mut dgamma = Vec::with_capacity(l.channels);
    let mut dbeta = Vec::with_capacity(l.channels);
    for c in 0..l.channels {
        let istd = E::from_f64(1.0 / (running_var.data()[c].to_f64() + eps).sqrt());
        let mean = running_mean.data()[c];
        let k = gamma.data()[c] * istd;
        let (mut sg, mut sb) = (E::zero(), E::zero());
        l.for_channel(c, |i| {
            dx[i] = gd[i] * k;
            sg += gd[i] * (xd[i] - mean) * istd;
            sb += gd[i];
        });
        dgamma.push(sg);
        dbeta.push(sb);
    }
    let cshape = Shape::new(vec![l.channels])?;
    Ok((
        Tensor::from_parts(x.shape().clone(), dx),
        Tensor::from_parts(cshape.clone(), dgamma),
        Tensor::from_parts(cshape, dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Fill, Rng};

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::ones(vec![c]).unwrap()
    }

    fn zeros(c: usize) -> Tensor<f64> {
        Tensor::zeros(vec![c]).unwrap()
    }

    #[test]
    fn identity_infer() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::new(
            vec![2, 3, 4, 4],
            Fill::Uniform {
                rng: &mut rng,
                lo: -2.0,
                hi: 2.0,
            },
        )
        .unwrap();
        let y = batchnorm_infer(&x, &ones(3), &zeros(3), &zeros(3), &ones(3), 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn constant_input_train_gives_beta() {
        let x = Tensor::<f64>::new(vec![4, 2, 3, 3], Fill::Constant(3.7)).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.25, -1.5]).unwrap();
        let r = batchnorm_train(&x, &ones(2), &beta, 1e-5).unwrap();
        for (i, &v) in r.output.data().iter().enumerate() {
            let c = (i / 9) % 2;
            assert!((v - beta.data()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn train_normalizes_each_channel() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f32>::new(
            vec![4, 3, 5, 5],
            Fill::Uniform {
                rng: &mut rng,
                lo: -3.0,
                hi: 5.0,
            },
        )
        .unwrap();
        let g = Tensor::<f32>::ones(vec![3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![3]).unwrap();
        let r = batchnorm_train(&x, &g, &b, 1e-5).unwrap();
        let y = r.output.data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bi| (0..25).map(move |s| (bi * 3 + c) * 25 + s))
                .map(|i| y[i] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 1]).unwrap();
        assert!(matches!(
            batchnorm_train(&x, &ones(1), &zeros(1), 0.0),
            Err(TensorError::InvalidParameter { .. })
        ));
    }

    #[test]
    fn running_update_momentum() {
        let x = Tensor::<f64>::from_vec(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let r = batchnorm_train(&x, &ones(1), &zeros(1), 1e-5).unwrap();
        let (m, v) = r.updated_running(&zeros(1), &ones(1), 0.1);
        assert!((m.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance of {1, 3} is 2
        assert!((v.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
