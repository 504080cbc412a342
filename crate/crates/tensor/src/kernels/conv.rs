use super::matmul::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Element, Result, Shape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dParams {
            stride,
            pad,
            groups,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams::new(1, 0, 1)
    }
}

/// `floor((extent + 2 pad - kernel) / stride) + 1`, or `None` when the
/// padded input is smaller than the kernel.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    p: Conv2dParams,
}

impl Geometry {
    fn check<E: Element>(
        x: &Tensor<E>,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        p: Conv2dParams,
    ) -> Result<Self> {
        let (xd, wd) = (x.dims(), weight.dims());
        if xd.len() != 4 || wd.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("expected 4-D input and weight, got {xd:?} and {wd:?}"),
            ));
        }
        if p.stride == 0 || p.groups == 0 {
            return Err(TensorError::param("conv2d", "stride and groups must be >= 1"));
        }
        let (batch, cin, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, cin_g, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "channels in={cin} out={cout} not divisible by groups={}",
                    p.groups
                ),
            ));
        }
        if cin_g != cin / p.groups {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "weight {wd:?} expects {cin_g} channels per group, input has {}",
                    cin / p.groups
                ),
            ));
        }
        if let Some(b) = bias {
            if b.dims() != [cout] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias {:?} vs {cout} output channels", b.dims()),
                ));
            }
        }
        let ho = conv_output_extent(h, kh, p.stride, p.pad);
        let wo = conv_output_extent(w, kw, p.stride, p.pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {})", p.pad),
            ));
        };
        Ok(Geometry {
            batch,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            cin_g,
            cout_g: cout / p.groups,
            p,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn out_dims(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    /// Source pixel for an output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.p.stride + ky).checked_sub(self.p.pad)?;
        let ix = (ox * self.p.stride + kx).checked_sub(self.p.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds one group of one image into `[cin_g * kh * kw, ho * wo]`.
fn im2col<E: Element>(g: &Geometry, img: &[E], col: &mut [E]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin_g {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match g.source(oy, ox, ky, kx) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => E::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(g: &Geometry, col: &[E], img: &mut [E]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin_g {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution over NCHW input with weight `[Cout, Cin/groups, kh, kw]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    p: Conv2dParams,
) -> Result<Tensor<E>> {
    let g = Geometry::check(x, weight, bias, p)?;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let ksize = g.cin_g * g.kh * g.kw;
    // Seed the output with the bias; the kernels below accumulate onto it.
    let mut out = vec![E::zero(); g.batch * g.cout * hw_out];
    if let Some(bias) = bias {
        for (plane, &bv) in out.chunks_mut(hw_out).zip(bias.data().iter().cycle()) {
            plane.fill(bv);
        }
    }
    let (xd, wd) = (x.data(), weight.data());

    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let plane = &xd[(b * g.cin + c) * hw_in..][..hw_in];
                let kernel = &wd[c * g.kh * g.kw..][..g.kh * g.kw];
                let dst = &mut out[(b * g.cout + c) * hw_out..][..hw_out];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = dst[oy * g.wo + ox];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                    acc += kernel[ky * g.kw + kx] * plane[iy * g.w + ix];
                                }
                            }
                        }
                        dst[oy * g.wo + ox] = acc;
                    }
                }
            }
        }
    } else {
        let mut col = vec![E::zero(); if g.is_pointwise() { 0 } else { ksize * hw_out }];
        for b in 0..g.batch {
            for grp in 0..p.groups {
                let img = &xd[(b * g.cin + grp * g.cin_g) * hw_in..][..g.cin_g * hw_in];
                let w_g = &wd[grp * g.cout_g * ksize..][..g.cout_g * ksize];
                let dst = &mut out[(b * g.cout + grp * g.cout_g) * hw_out..][..g.cout_g * hw_out];
                if g.is_pointwise() {
                    gemm_nn(w_g, img, dst, g.cout_g, ksize, hw_out);
                } else {
                    im2col(&g, img, &mut col);
                    gemm_nn(w_g, &col, dst, g.cout_g, ksize, hw_out);
                }
            }
        }
    }

    Ok(Tensor::from_parts(Shape::new(g.out_dims())?, out))
}

pub struct Conv2dGrads<E: Element> {
    pub input: Option<Tensor<E>>,
    pub weight: Option<Tensor<E>>,
    pub bias: Option<Tensor<E>>,
}

/// Gradients of [`conv2d`]; each is computed only when requested.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    p: Conv2dParams,
    need: [bool; 3],
) -> Result<Conv2dGrads<E>> {
    let g = Geometry::check(x, weight, None, p)?;
    if grad_out.dims() != g.out_dims().as_slice() {
        return Err(TensorError::shape(
            "conv2d_backward",
            format!("grad {:?} vs output {:?}", grad_out.dims(), g.out_dims()),
        ));
    }
    let [need_x, need_w, need_b] = need;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let ksize = g.cin_g * g.kh * g.kw;
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = need_x.then(|| vec![E::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![E::zero(); weight.numel()]);

    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.cin {
                let plane = &xd[(b * g.cin + c) * hw_in..][..hw_in];
                let kernel = &wd[c * g.kh * g.kw..][..g.kh * g.kw];
                let go = &gd[(b * g.cout + c) * hw_out..][..hw_out];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let gv = go[oy * g.wo + ox];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                    if let Some(gw) = gw.as_mut() {
                                        gw[c * g.kh * g.kw + ky * g.kw + kx] +=
                                            gv * plane[iy * g.w + ix];
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        gx[(b * g.cin + c) * hw_in + iy * g.w + ix] +=
                                            gv * kernel[ky * g.kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else if need_x || need_w {
        let mut col = vec![E::zero(); ksize * hw_out];
        let mut gcol = vec![E::zero(); ksize * hw_out];
        for b in 0..g.batch {
            for grp in 0..p.groups {
                let x_off = (b * g.cin + grp * g.cin_g) * hw_in;
                let img = &xd[x_off..][..g.cin_g * hw_in];
                let w_off = grp * g.cout_g * ksize;
                let w_g = &wd[w_off..][..g.cout_g * ksize];
                let go = &gd[(b * g.cout + grp * g.cout_g) * hw_out..][..g.cout_g * hw_out];
                let cols: &[E] = if g.is_pointwise() {
                    img
                } else {
                    im2col(&g, img, &mut col);
                    &col
                };
                if let Some(gw) = gw.as_mut() {
                    gemm_nt(go, cols, &mut gw[w_off..][..g.cout_g * ksize], g.cout_g, hw_out, ksize);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[x_off..][..g.cin_g * hw_in];
                    if g.is_pointwise() {
                        gemm_tn(w_g, go, dst, ksize, g.cout_g, hw_out);
                    } else {
                        gcol.iter_mut().for_each(|v| *v = E::zero());
                        gemm_tn(w_g, go, &mut gcol, ksize, g.cout_g, hw_out);
                        col2im(&g, &gcol, dst);
                    }
                }
            }
        }
    }

    let gb = need_b.then(|| {
        let mut gb = vec![E::zero(); g.cout];
        for b in 0..g.batch {
            for (c, acc) in gb.iter_mut().enumerate() {
                for &v in &gd[(b * g.cout + c) * hw_out..][..hw_out] {
                    *acc += v;
                }
            }
        }
        Tensor::from_parts(Shape::new(vec![g.cout]).expect("cout >= 1"), gb)
    });
    Ok(Conv2dGrads {
        input: gx.map(|v| Tensor::from_parts(x.shape().clone(), v)),
        weight: gw.map(|v| Tensor::from_parts(weight.shape().clone(), v)),
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_output_extent(14, 3, 2, 1), Some(7));
        assert_eq!(conv_output_extent(224, 3, 2, 1), Some(112));
        assert_eq!(conv_output_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn identity_pointwise() {
        let x = Tensor::<f32>::from_vec(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::from_vec(vec![2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams::default()).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(vec![4, 1, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dParams::new(1, 1, 2)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pointwise_bias_count() {
        let x = Tensor::<f64>::ones(vec![2, 1, 3, 3]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let y = conv2d(&x, &w, Some(&b), Conv2dParams::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }
}
