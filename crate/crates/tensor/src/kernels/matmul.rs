use crate::shape::{broadcast_shapes, broadcast_strides};
use crate::{Element, Result, Shape, Tensor, TensorError};

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

struct Plan {
    out_dims: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

/// Element offsets of each broadcast batch entry in `src`.
fn batch_offsets(src_batch: &[usize], out_batch: &[usize], mat: usize) -> Vec<usize> {
    let strides = broadcast_strides(src_batch, out_batch);
    let count: usize = out_batch.iter().product();
    let mut idx = vec![0usize; out_batch.len()];
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        offsets.push(off * mat);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

fn plan<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Plan> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() < 2 || bd.len() < 2 {
        return Err(TensorError::shape(
            "matmul",
            format!("operands need rank >= 2, got {ad:?} and {bd:?}"),
        ));
    }
    let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (k2, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
    if k != k2 {
        return Err(TensorError::shape(
            "matmul",
            format!("inner extents differ: {ad:?} @ {bd:?}"),
        ));
    }
    let a_batch = &ad[..ad.len() - 2];
    let b_batch = &bd[..bd.len() - 2];
    let out_batch = broadcast_shapes("matmul", a_batch, b_batch)?;
    let a_offsets = batch_offsets(a_batch, &out_batch, m * k);
    let b_offsets = batch_offsets(b_batch, &out_batch, k * n);
    let mut out_dims = out_batch;
    out_dims.extend([m, n]);
    Ok(Plan {
        out_dims,
        m,
        k,
        n,
        a_offsets,
        b_offsets,
    })
}

/// Batched matrix product `[.., M, K] @ [.., K, N] -> [.., M, N]`; batch
/// extents broadcast numpy-style.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let p = plan(a, b)?;
    let mn = p.m * p.n;
    let mut out = vec![E::zero(); p.a_offsets.len() * mn];
    for (bi, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        gemm_nn(
            &a.data()[ao..ao + p.m * p.k],
            &b.data()[bo..bo + p.k * p.n],
            &mut out[bi * mn..(bi + 1) * mn],
            p.m,
            p.k,
            p.n,
        );
    }
    Ok(Tensor::from_parts(Shape::new(p.out_dims)?, out))
}

/// Gradients of `matmul(a, b)` w.r.t. each operand, summed over broadcast batch axes.
pub fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>)> {
    let p = plan(a, b)?;
    if grad_out.dims() != p.out_dims.as_slice() {
        return Err(TensorError::shape(
            "matmul_backward",
            format!("grad {:?} vs output {:?}", grad_out.dims(), p.out_dims),
        ));
    }
    let mn = p.m * p.n;
    let mut ga = need_a.then(|| vec![E::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![E::zero(); b.numel()]);
    for (bi, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        let go = &grad_out.data()[bi * mn..(bi + 1) * mn];
        if let Some(ga) = ga.as_mut() {
            gemm_nt(
                go,
                &b.data()[bo..bo + p.k * p.n],
                &mut ga[ao..ao + p.m * p.k],
                p.m,
                p.n,
                p.k,
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(
                &a.data()[ao..ao + p.m * p.k],
                go,
                &mut gb[bo..bo + p.k * p.n],
                p.k,
                p.m,
                p.n,
            );
        }
    }
    Ok((
        ga.map(|v| Tensor::from_parts(a.shape().clone(), v)),
        gb.map(|v| Tensor::from_parts(b.shape().clone(), v)),
    ))
}
