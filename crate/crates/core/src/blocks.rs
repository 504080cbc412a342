//! Sandwich blocks, subsample blocks, the patch-embedding stem and the classifier head.

use evit_tensor::{Element, Tensor, TensorError, Var};

use crate::attention::{AttentionKind, GroupAttention};
use crate::layers::{Bn, ConvBn, Cx, Linear};
use crate::params::{ParamBuilder, ParamKind, ParamStore};
use crate::{ModelError, Result};

/// Residual depthwise conv + BN.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub dw: ConvBn,
}

impl TokenMixer {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, dim: usize, kernel: usize) -> Result<Self> {
        Ok(TokenMixer {
            dw: b.conv_bn("mixer", dim, dim, kernel, 1, dim)?,
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let y = self.dw.forward(cx, x)?;
        Ok(cx.g.add(x, y)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.dw.macs(h, w)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(TokenMixer {
            dw: self.dw.fold(old, new)?,
        })
    }
}

/// Residual pointwise FFN: 1x1 expand + BN + ReLU + 1x1 project + BN.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: ConvBn,
    pub project: ConvBn,
}

impl Ffn {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, dim: usize, ratio: usize) -> Result<Self> {
        b.scope("ffn", |b| {
            Ok(Ffn {
                expand: b.conv_bn("expand", dim, dim * ratio, 1, 1, 1)?,
                project: b.conv_bn("project", dim * ratio, dim, 1, 1, 1)?,
            })
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let y = self.expand.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        let y = self.project.forward(cx, y)?;
        Ok(cx.g.add(x, y)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w) + self.project.macs(h, w)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(Ffn {
            expand: self.expand.fold(old, new)?,
            project: self.project.fold(old, new)?,
        })
    }
}

/// One token mixer followed by one FFN.
#[derive(Clone, Debug)]
pub struct FfnUnit {
    pub mixer: TokenMixer,
    pub ffn: Ffn,
}

impl FfnUnit {
    fn build_all<E: Element>(
        b: &mut ParamBuilder<'_, E>,
        scope: &str,
        n: usize,
        dim: usize,
        kernel: usize,
        ratio: usize,
    ) -> Result<Vec<Self>> {
        (0..n)
            .map(|i| {
                b.scope(format!("{scope}.{i}"), |b| {
                    Ok(FfnUnit {
                        mixer: TokenMixer::build(b, dim, kernel)?,
                        ffn: Ffn::build(b, dim, ratio)?,
                    })
                })
            })
            .collect()
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let x = self.mixer.forward(cx, x)?;
        self.ffn.forward(cx, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.mixer.macs(h, w) + self.ffn.macs(h, w)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(FfnUnit {
            mixer: self.mixer.fold(old, new)?,
            ffn: self.ffn.fold(old, new)?,
        })
    }
}

fn run_units<E: Element>(units: &[FfnUnit], cx: &mut Cx<'_, E>, mut x: Var) -> Result<Var> {
    for u in units {
        x = u.forward(cx, x)?;
    }
    Ok(x)
}

fn fold_units<E: Element>(units: &[FfnUnit], old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Vec<FfnUnit>> {
    units.iter().map(|u| u.fold(old, new)).collect()
}

/// Shape-independent hyperparameters shared by the blocks of one stage.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub qk_dim: usize,
    pub ffn_ratio: usize,
    pub n_ffn: usize,
    pub dw_kernel: usize,
    pub attention: AttentionKind,
    pub share_heads: bool,
}

/// `n_ffn` (mixer, FFN) pairs, residual attention, `n_ffn` more pairs.
#[derive(Clone, Debug)]
pub struct SandwichBlock {
    pub pre: Vec<FfnUnit>,
    pub attn: GroupAttention,
    pub post: Vec<FfnUnit>,
}

impl SandwichBlock {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, c: &BlockConfig) -> Result<Self> {
        let pre = FfnUnit::build_all(b, "pre", c.n_ffn, c.dim, c.dw_kernel, c.ffn_ratio)?;
        let attn = b.scope("attn", |b| {
            GroupAttention::build(b, c.dim, c.heads, c.qk_dim, c.dw_kernel, c.attention, c.share_heads)
        })?;
        let post = FfnUnit::build_all(b, "post", c.n_ffn, c.dim, c.dw_kernel, c.ffn_ratio)?;
        Ok(SandwichBlock { pre, attn, post })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let x = run_units(&self.pre, cx, x)?;
        let a = self.attn.forward(cx, x)?;
        let x = cx.g.add(x, a)?;
        run_units(&self.post, cx, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let units: u64 = self.pre.iter().chain(&self.post).map(|u| u.macs(h, w)).sum();
        units + self.attn.macs(h, w)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(SandwichBlock {
            pre: fold_units(&self.pre, old, new)?,
            attn: self.attn.fold(old, new)?,
            post: fold_units(&self.post, old, new)?,
        })
    }
}

/// Rounds `v` to a multiple of `divisor`, never dropping more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d) as usize;
    if (n as f64) < 0.9 * v {
        n += divisor;
    }
    n
}

/// Channel gate: pool, reduce, ReLU, expand, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: ConvBn,
    pub expand: ConvBn,
}

impl SqueezeExcite {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, dim: usize) -> Result<Self> {
        let rd = make_divisible(dim as f64 * 0.25, 8);
        b.scope("se", |b| {
            Ok(SqueezeExcite {
                reduce: b.conv("reduce", dim, rd, 1, 1, 1, true)?,
                expand: b.conv("expand", rd, dim, 1, 1, 1, true)?,
            })
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let d = cx.g.value(x).dims().to_vec();
        let s = cx.g.global_avg_pool(x)?;
        let s = cx.g.reshape(s, vec![d[0], d[1], 1, 1])?;
        let s = self.reduce.forward(cx, s)?;
        let s = cx.g.relu(s)?;
        let s = self.expand.forward(cx, s)?;
        let s = cx.g.sigmoid(s)?;
        Ok(cx.g.mul(x, s)?)
    }

    pub fn macs(&self) -> u64 {
        self.reduce.macs(1, 1) + self.expand.macs(1, 1)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(SqueezeExcite {
            reduce: self.reduce.fold(old, new)?,
            expand: self.expand.fold(old, new)?,
        })
    }
}

pub const SUBSAMPLE_EXPANSION: usize = 4;

/// Expand 1x1, strided depthwise 3x3, squeeze-excite, project 1x1. No residual.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: ConvBn,
    pub dw: ConvBn,
    pub se: SqueezeExcite,
    pub project: ConvBn,
}

impl InvertedResidual {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, cin: usize, cout: usize) -> Result<Self> {
        let hid = cin * SUBSAMPLE_EXPANSION;
        b.scope("ir", |b| {
            Ok(InvertedResidual {
                expand: b.conv_bn("expand", cin, hid, 1, 1, 1)?,
                dw: b.conv_bn("dw", hid, hid, 3, 2, hid)?,
                se: SqueezeExcite::build(b, hid)?,
                project: b.conv_bn("project", hid, cout, 1, 1, 1)?,
            })
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let y = self.expand.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        let y = self.dw.forward(cx, y)?;
        let y = cx.g.relu(y)?;
        let y = self.se.forward(cx, y)?;
        self.project.forward(cx, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.dw.out_extent(h), self.dw.out_extent(w));
        self.expand.macs(h, w) + self.dw.macs(h, w) + self.se.macs() + self.project.macs(ho, wo)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(InvertedResidual {
            expand: self.expand.fold(old, new)?,
            dw: self.dw.fold(old, new)?,
            se: self.se.fold(old, new)?,
            project: self.project.fold(old, new)?,
        })
    }
}

/// Stage transition: FFN units at `cin`, strided inverted residual, FFN units at `cout`.
#[derive(Clone, Debug)]
pub struct SubsampleBlock {
    pub pre: Vec<FfnUnit>,
    pub ir: InvertedResidual,
    pub post: Vec<FfnUnit>,
}

impl SubsampleBlock {
    pub fn build<E: Element>(
        b: &mut ParamBuilder<'_, E>,
        cin: usize,
        cout: usize,
        n_ffn: usize,
        ffn_ratio: usize,
        dw_kernel: usize,
    ) -> Result<Self> {
        Ok(SubsampleBlock {
            pre: FfnUnit::build_all(b, "pre", n_ffn, cin, dw_kernel, ffn_ratio)?,
            ir: InvertedResidual::build(b, cin, cout)?,
            post: FfnUnit::build_all(b, "post", n_ffn, cout, dw_kernel, ffn_ratio)?,
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let x = run_units(&self.pre, cx, x)?;
        let x = self.ir.forward(cx, x)?;
        run_units(&self.post, cx, x)
    }

    pub fn out_extent(&self, extent: usize) -> usize {
        self.ir.dw.out_extent(extent)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        let pre: u64 = self.pre.iter().map(|u| u.macs(h, w)).sum();
        let post: u64 = self.post.iter().map(|u| u.macs(ho, wo)).sum();
        pre + self.ir.macs(h, w) + post
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(SubsampleBlock {
            pre: fold_units(&self.pre, old, new)?,
            ir: self.ir.fold(old, new)?,
            post: fold_units(&self.post, old, new)?,
        })
    }
}

/// Four stride-2 3x3 conv+BN layers with ReLU between them: 16x downsampling.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub convs: Vec<ConvBn>,
}

impl PatchEmbed {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, in_chans: usize, dim: usize) -> Result<Self> {
        let ramp = [in_chans, dim / 8, dim / 4, dim / 2, dim];
        let convs = (0..4)
            .map(|i| b.conv_bn(&i.to_string(), ramp[i], ramp[i + 1], 3, 2, 1))
            .collect::<Result<_>>()?;
        Ok(PatchEmbed { convs })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let d = cx.g.value(x).dims().to_vec();
        if d.len() != 4 || d[1] != self.convs[0].cin || d[2] % 16 != 0 || d[3] % 16 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                detail: format!(
                    "expected [B, {}, H, W] with H and W divisible by 16, got {d:?}",
                    self.convs[0].cin
                ),
            }
            .into());
        }
        let mut x = x;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(cx, x)?;
            if i + 1 < self.convs.len() {
                x = cx.g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Returns MACs and the output extents.
    pub fn macs(&self, mut h: usize, mut w: usize) -> (u64, usize, usize) {
        let mut total = 0;
        for c in &self.convs {
            total += c.macs(h, w);
            h = c.out_extent(h);
            w = c.out_extent(w);
        }
        (total, h, w)
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        Ok(PatchEmbed {
            convs: self.convs.iter().map(|c| c.fold(old, new)).collect::<Result<_>>()?,
        })
    }
}

/// Global average pool, BN over channels, linear classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub bn: Option<Bn>,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn build<E: Element>(b: &mut ParamBuilder<'_, E>, dim: usize, classes: usize) -> Result<Self> {
        Ok(ClassifierHead {
            bn: Some(b.bn("bn", dim)?),
            linear: b.linear("linear", dim, classes, true)?,
        })
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let mut y = cx.g.global_avg_pool(x)?;
        if let Some(bn) = &self.bn {
            y = cx.batchnorm(bn, y)?;
        }
        self.linear.forward(cx, y)
    }

    pub fn macs(&self) -> u64 {
        self.linear.macs()
    }

    /// The BN follows pooling, so it is absorbed into the linear layer after it:
    /// `W' = W diag(s)`, `b' = b + W t` for `bn(x) = s x + t`.
    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        let Some(bn) = &self.bn else {
            return Ok(ClassifierHead {
                bn: None,
                linear: self.linear.copy(old, new)?,
            });
        };
        let l = &self.linear;
        let w = old.tensor(l.weight);
        if bn.channels != l.fan_in || w.dims() != [l.fan_out, l.fan_in] {
            return Err(ModelError::Structure(format!(
                "{}: BN over {} channels cannot fold into a linear layer with weight {:?}",
                old.name(l.weight),
                bn.channels,
                w.dims()
            )));
        }
        let (scale, shift) = bn.affine(old)?;
        let wd = w.to_f64_vec();
        let b0 = match l.bias {
            Some(b) => old.tensor(b).to_f64_vec(),
            None => vec![0.0; l.fan_out],
        };
        let mut nw = Vec::with_capacity(wd.len());
        let mut nb = Vec::with_capacity(l.fan_out);
        for (o, row) in wd.chunks_exact(l.fan_in).enumerate() {
            nw.extend(row.iter().zip(&scale).map(|(w, s)| w * s));
            nb.push(b0[o] + row.iter().zip(&shift).map(|(w, t)| w * t).sum::<f64>());
        }
        let wname = old.name(l.weight).to_string();
        let bname = match l.bias {
            Some(b) => old.name(b).to_string(),
            None => crate::layers::sibling(&wname, "bias"),
        };
        let weight = new.insert(
            wname,
            Tensor::from_f64_slice(w.dims().to_vec(), &nw)?,
            ParamKind::Weight,
        )?;
        let bias = new.insert(
            bname,
            Tensor::from_f64_slice(vec![l.fan_out], &nb)?,
            ParamKind::Bias,
        )?;
        Ok(ClassifierHead {
            bn: None,
            linear: Linear {
                weight,
                bias: Some(bias),
                ..l.clone()
            },
        })
    }
}
