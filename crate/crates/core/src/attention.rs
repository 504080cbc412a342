//! Cascaded group attention and its two reference variants.

use serde::{Deserialize, Serialize};

use evit_tensor::{Element, Tensor, TensorError, Var};

use crate::layers::{ConvBn, Cx};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::Result;

/// How attention heads see the input feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Head `j` takes split `j` plus head `j - 1`'s output.
    Cascaded,
    /// Head `j` takes split `j` only.
    Split,
    /// Every head projects the full feature (standard multi-head attention).
    Full,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Cascaded => "cga",
            AttentionKind::Split => "split",
            AttentionKind::Full => "mhsa",
        }
    }
}

/// Attention maps, inputs and outputs of every head, captured during one forward.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace<E: Element = f32> {
    pub blocks: Vec<BlockTrace<E>>,
}

#[derive(Clone, Debug)]
pub struct BlockTrace<E: Element = f32> {
    pub stage: usize,
    pub block: usize,
    pub heads: Vec<HeadTrace<E>>,
}

#[derive(Clone, Debug)]
pub struct HeadTrace<E: Element = f32> {
    /// Post-softmax map `[B, N, N]`.
    pub attention: Tensor<E>,
    /// What the head's projections saw, `[B, C_in, H, W]`.
    pub input: Tensor<E>,
    /// Head output before concatenation, `[B, d, H, W]`.
    pub output: Tensor<E>,
}

impl<E: Element> AttentionTrace<E> {
    pub fn new() -> Self {
        AttentionTrace { blocks: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Projections owned by one head.
#[derive(Clone, Debug)]
pub struct AttnHead {
    pub q: ConvBn,
    pub k: ConvBn,
    pub v: ConvBn,
    /// Depthwise token interaction applied to Q.
    pub q_dw: ConvBn,
}

#[derive(Clone, Debug)]
pub struct GroupAttention {
    pub kind: AttentionKind,
    pub dim: usize,
    pub num_heads: usize,
    pub qk_dim: usize,
    /// Value width per head; `num_heads * head_dim == dim`.
    pub head_dim: usize,
    pub heads: Vec<AttnHead>,
    pub proj: ConvBn,
}

impl GroupAttention {
    /// With `share` set, every head reuses head 0's parameters.
    pub fn build<E: Element>(
        b: &mut ParamBuilder<'_, E>,
        dim: usize,
        num_heads: usize,
        qk_dim: usize,
        dw_kernel: usize,
        kind: AttentionKind,
        share: bool,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("{dim} channels not divisible by {num_heads} heads"),
            }
            .into());
        }
        let head_dim = dim / num_heads;
        let cin = match kind {
            AttentionKind::Full => dim,
            _ => head_dim,
        };
        let mut heads: Vec<AttnHead> = Vec::with_capacity(num_heads);
        for j in 0..num_heads {
            if share && j > 0 {
                heads.push(heads[0].clone());
                continue;
            }
            let head = b.scope(format!("heads.{j}"), |b| {
                Ok(AttnHead {
                    q: b.conv_bn("q", cin, qk_dim, 1, 1, 1)?,
                    k: b.conv_bn("k", cin, qk_dim, 1, 1, 1)?,
                    v: b.conv_bn("v", cin, head_dim, 1, 1, 1)?,
                    q_dw: b.conv_bn("q_dw", qk_dim, qk_dim, dw_kernel, 1, qk_dim)?,
                })
            })?;
            heads.push(head);
        }
        let proj = b.conv_bn("proj", dim, dim, 1, 1, 1)?;
        Ok(GroupAttention {
            kind,
            dim,
            num_heads,
            qk_dim,
            head_dim,
            heads,
            proj,
        })
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.qk_dim as f64).sqrt()
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let dims = cx.g.value(x).dims().to_vec();
        if dims.len() != 4 || dims[1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("expected [B, {}, H, W], got {dims:?}", self.dim),
            }
            .into());
        }
        let (b, h, w) = (dims[0], dims[2], dims[3]);
        let n = h * w;
        let splits = match self.kind {
            AttentionKind::Full => Vec::new(),
            _ => cx.g.split(x, self.num_heads)?,
        };
        let tracing = cx.trace.is_some();
        let mut traced = Vec::new();
        let mut outs: Vec<Var> = Vec::with_capacity(self.num_heads);
        for (j, head) in self.heads.iter().enumerate() {
            let mut input = match self.kind {
                AttentionKind::Full => x,
                _ => splits[j],
            };
            if self.kind == AttentionKind::Cascaded && j > 0 {
                input = cx.g.add(input, outs[j - 1])?;
            }
            let q = head.q.forward(cx, input)?;
            let q = head.q_dw.forward(cx, q)?;
            let k = head.k.forward(cx, input)?;
            let v = head.v.forward(cx, input)?;
            let q = cx.g.reshape(q, vec![b, self.qk_dim, n])?;
            let k = cx.g.reshape(k, vec![b, self.qk_dim, n])?;
            let v = cx.g.reshape(v, vec![b, self.head_dim, n])?;
            let qt = cx.g.transpose_last2(q)?;
            let logits = cx.g.matmul(qt, k)?;
            let logits = cx.g.scale(logits, self.scale())?;
            let attn = cx.g.softmax(logits)?;
            let attn_t = cx.g.transpose_last2(attn)?;
            let out = cx.g.matmul(v, attn_t)?;
            let out = cx.g.reshape(out, vec![b, self.head_dim, h, w])?;
            if tracing {
                traced.push(HeadTrace {
                    attention: cx.g.value(attn).clone().with_requires_grad(false),
                    input: cx.g.value(input).clone().with_requires_grad(false),
                    output: cx.g.value(out).clone().with_requires_grad(false),
                });
            }
            outs.push(out);
        }
        if let Some(trace) = cx.trace.as_deref_mut() {
            trace.blocks.push(BlockTrace {
                stage: cx.location.0,
                block: cx.location.1,
                heads: traced,
            });
        }
        let cat = cx.g.concat(&outs)?;
        self.proj.forward(cx, cat)
    }

    /// Multiply-accumulates over an `h x w` token grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = (h * w) as u64;
        let per_head: u64 = self.heads[0].q.macs(h, w)
            + self.heads[0].k.macs(h, w)
            + self.heads[0].v.macs(h, w)
            + self.heads[0].q_dw.macs(h, w)
            + n * n * self.qk_dim as u64
            + n * n * self.head_dim as u64;
        per_head * self.num_heads as u64 + self.proj.macs(h, w)
    }

    /// Distinct Q, K and V projection weight tensors.
    pub fn qkv_weights(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .heads
            .iter()
            .flat_map(|h| [h.q.weight, h.k.weight, h.v.weight])
            .collect();
        ids.sort_by_key(|id| id.index());
        ids.dedup();
        ids
    }

    /// Scalar count of the Q, K and V projection weights held in `store`.
    pub fn qkv_weight_count<E: Element>(&self, store: &ParamStore<E>) -> u64 {
        self.qkv_weights()
            .iter()
            .map(|&id| store.tensor(id).numel() as u64)
            .sum()
    }

    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Self> {
        let mut heads: Vec<AttnHead> = Vec::with_capacity(self.heads.len());
        for (j, h) in self.heads.iter().enumerate() {
            // Shared heads stay shared.
            if let Some(i) = self.heads[..j].iter().position(|p| p.q.weight == h.q.weight) {
                heads.push(heads[i].clone());
                continue;
            }
            heads.push(AttnHead {
                q: h.q.fold(old, new)?,
                k: h.k.fold(old, new)?,
                v: h.v.fold(old, new)?,
                q_dw: h.q_dw.fold(old, new)?,
            });
        }
        Ok(GroupAttention {
            heads,
            proj: self.proj.fold(old, new)?,
            ..self.clone()
        })
    }
}
