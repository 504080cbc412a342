use crate::{Element, Result, Shape, Tensor, TensorError};

/// Swaps the last two axes (copying).
pub fn transpose_last2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = x.dims();
    if d.len() < 2 {
        return Err(TensorError::shape("transpose_last2", format!("rank {} < 2", d.len())));
    }
    let (r, c) = (d[d.len() - 2], d[d.len() - 1]);
    let mut out = vec![E::zero(); x.numel()];
    for (src, dst) in x.data().chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut nd = d.to_vec();
    let n = nd.len();
    nd.swap(n - 2, n - 1);
    Ok(Tensor::from_parts(Shape::new(nd)?, out))
}

/// Concatenates along axis 1; all other extents must agree.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat_channels", "no inputs"))?;
    let d = first.dims();
    if d.len() < 2 {
        return Err(TensorError::shape("concat_channels", format!("rank {} < 2", d.len())));
    }
    for p in parts {
        let pd = p.dims();
        if pd.len() != d.len() || pd[0] != d[0] || pd[2..] != d[2..] {
            return Err(TensorError::shape(
                "concat_channels",
                format!("{pd:?} incompatible with {d:?}"),
            ));
        }
    }
    let inner: usize = d[2..].iter().product();
    let total_c: usize = parts.iter().map(|p| p.dims()[1]).sum();
    let mut out = Vec::with_capacity(d[0] * total_c * inner);
    for b in 0..d[0] {
        for p in parts {
            let block = p.dims()[1] * inner;
            out.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    let mut nd = d.to_vec();
    nd[1] = total_c;
    Ok(Tensor::from_parts(Shape::new(nd)?, out))
}

/// Channels `start..start + len` of axis 1 (copying).
pub fn narrow_channels<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let d = x.dims();
    if d.len() < 2 || len == 0 || start + len > d[1] {
        return Err(TensorError::shape(
            "narrow_channels",
            format!("range {start}..{} of {d:?}", start + len),
        ));
    }
    let inner: usize = d[2..].iter().product();
    let mut out = Vec::with_capacity(d[0] * len * inner);
    for b in 0..d[0] {
        let base = (b * d[1] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut nd = d.to_vec();
    nd[1] = len;
    Ok(Tensor::from_parts(Shape::new(nd)?, out))
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(TensorError::shape("global_avg_pool", format!("expected 4-D, got {d:?}")));
    }
    let hw = d[2] * d[3];
    let inv = E::from_f64(1.0 / hw as f64);
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<E>() * inv)
        .collect();
    Ok(Tensor::from_parts(Shape::new(vec![d[0], d[1]])?, out))
}

pub fn sum_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    Tensor::from_parts(Shape::scalar(), vec![x.data().iter().copied().sum()])
}
