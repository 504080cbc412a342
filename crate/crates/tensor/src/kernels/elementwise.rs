use crate::shape::{broadcast_shapes, broadcast_strides};
use crate::{Element, Result, Shape, Tensor};

/// Visits `(out_index, a_offset, b_offset)` for a broadcast pair.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.dims() == b.dims() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().clone(), data));
    }
    let out = broadcast_shapes(op, a.dims(), b.dims())?;
    let mut data = vec![E::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.dims(), b.dims(), &out, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(Shape::new(out)?, data))
}

/// Broadcasting elementwise sum.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary("add", a, b, |x, y| x + y)
}

/// Broadcasting elementwise product.
pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale<E: Element>(a: &Tensor<E>, k: E) -> Tensor<E> {
    a.map(|v| v * k)
}

pub fn relu<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn sigmoid<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    a.map(|v| E::one() / (E::one() + (-v).exp()))
}

/// Sums a broadcast gradient back down to `target` extents.
pub fn reduce_to_shape<E: Element>(grad: &Tensor<E>, target: &Shape) -> Result<Tensor<E>> {
    if grad.dims() == target.dims() {
        return Ok(grad.clone());
    }
    let out = grad.dims();
    let mut acc = vec![E::zero(); target.numel()];
    let gd = grad.data();
    for_each_broadcast(target.dims(), target.dims(), out, |i, ot, _| acc[ot] += gd[i]);
    Ok(Tensor::from_parts(target.clone(), acc))
}
