use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use evit_tensor::{BnMode, Element, Graph, Rng, Tensor, TensorError, Var};

use crate::attention::{AttentionKind, AttentionTrace};
use crate::blocks::{BlockConfig, ClassifierHead, PatchEmbed, SandwichBlock, SubsampleBlock};
use crate::layers::Cx;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::spec::{ModelSpec, Variant};
use crate::{ModelError, Result};

pub const IN_CHANNELS: usize = 3;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Choices that change the model's structure without changing its spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub attention: AttentionKind,
    /// Every head in a block reuses one parameter set.
    pub share_head_weights: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            attention: AttentionKind::Cascaded,
            share_head_weights: false,
        }
    }
}

/// Result of running the model inside a caller-owned graph.
pub struct ForwardPass<E: Element> {
    pub logits: Var,
    /// One var per store entry, in store order.
    pub params: Vec<Var>,
    /// Running statistics computed by training-mode BN layers.
    pub updates: Vec<(ParamId, Tensor<E>)>,
}

#[derive(Clone, Debug)]
pub struct Model<E: Element = f32> {
    spec: ModelSpec,
    options: BuildOptions,
    params: ParamStore<E>,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<SandwichBlock>>,
    pub subsamples: Vec<SubsampleBlock>,
    pub head: ClassifierHead,
    folded: bool,
    training: bool,
    momentum: f64,
}

impl<E: Element> Model<E> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, BuildOptions::default(), seed)
    }

    pub fn variant(v: Variant, seed: u64) -> Result<Self> {
        Self::build(&v.spec(), seed)
    }

    /// Builds every layer in forward order, drawing all weights from `Rng::new(seed)`.
    pub fn build_with(spec: &ModelSpec, options: BuildOptions, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let embed = b.scope("embed", |b| PatchEmbed::build(b, IN_CHANNELS, spec.widths[0]))?;
        let mut stages = Vec::with_capacity(3);
        let mut subsamples = Vec::with_capacity(2);
        for s in 0..3 {
            if s > 0 {
                let sub = b.scope(format!("subsample.{}", s - 1), |b| {
                    SubsampleBlock::build(
                        b,
                        spec.widths[s - 1],
                        spec.widths[s],
                        spec.n_ffn,
                        spec.ffn_ratio,
                        spec.dw_kernel,
                    )
                })?;
                subsamples.push(sub);
            }
            let cfg = BlockConfig {
                dim: spec.widths[s],
                heads: spec.heads[s],
                qk_dim: spec.qk_dim,
                ffn_ratio: spec.ffn_ratio,
                n_ffn: spec.n_ffn,
                dw_kernel: spec.dw_kernel,
                attention: options.attention,
                share_heads: options.share_head_weights,
            };
            let blocks = (0..spec.depths[s])
                .map(|i| b.scope(format!("stages.{s}.{i}"), |b| SandwichBlock::build(b, &cfg)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let head = b.scope("head", |b| ClassifierHead::build(b, spec.widths[2], spec.num_classes))?;
        Ok(Model {
            spec: spec.clone(),
            options,
            params,
            embed,
            stages,
            subsamples,
            head,
            folded: false,
            training: false,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    /// Mutable access for loading or editing tensors; shapes are enforced by [`ParamStore::set`].
    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Training mode normalises with batch statistics and records gradients.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(ModelError::Param(format!("momentum {momentum} outside [0, 1]")));
        }
        self.momentum = momentum;
        Ok(())
    }

    pub fn bn_mode(&self) -> BnMode {
        if self.training {
            BnMode::Train {
                momentum: self.momentum,
            }
        } else {
            BnMode::Infer
        }
    }

    /// `(stage, index, block)` for every sandwich block in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &SandwichBlock)> + '_ {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, blocks)| blocks.iter().enumerate().map(move |(i, b)| (s, i, b)))
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let r = self.spec.input_resolution;
        if dims.len() != 4 || dims[1] != IN_CHANNELS || dims[2] != r || dims[3] != r {
            return Err(TensorError::ShapeMismatch {
                op: "model_forward",
                detail: format!("expected [B, {IN_CHANNELS}, {r}, {r}], got {dims:?}"),
            }
            .into());
        }
        Ok(())
    }

    /// Runs the network inside `g`. Parameters require gradients only when the
    /// graph records and the model is in training mode.
    pub fn forward_in(
        &self,
        g: &mut Graph<E>,
        x: Var,
        trace: Option<&mut AttentionTrace<E>>,
    ) -> Result<ForwardPass<E>> {
        self.check_input(g.value(x).dims())?;
        let params = self.params.bind(g, g.is_recording() && self.training);
        let mut cx = Cx::new(g, &params, self.bn_mode());
        if let Some(t) = trace {
            cx = cx.with_trace(t);
        }
        let mut h = self.embed.forward(&mut cx, x)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = self.subsamples[s - 1].forward(&mut cx, h)?;
            }
            for (i, block) in blocks.iter().enumerate() {
                cx.set_location(s, i);
                h = block.forward(&mut cx, h)?;
            }
        }
        let logits = self.head.forward(&mut cx, h)?;
        let updates = cx.take_updates();
        Ok(ForwardPass {
            logits,
            params,
            updates,
        })
    }

    /// Logits `[B, num_classes]` on a throwaway non-recording graph.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.run(x, None)
    }

    pub fn forward_traced(&self, x: &Tensor<E>, trace: &mut AttentionTrace<E>) -> Result<Tensor<E>> {
        self.run(x, Some(trace))
    }

    fn run(&self, x: &Tensor<E>, trace: Option<&mut AttentionTrace<E>>) -> Result<Tensor<E>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let pass = self.forward_in(&mut g, xv, trace)?;
        Ok(g.value(pass.logits).clone())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<E>)>) -> Result<()> {
        for (id, t) in updates {
            self.params.set(id, t)?;
        }
        Ok(())
    }

    /// Sets every BN's running statistics to those observed on `x` (one
    /// training-mode pass with momentum 1). Leaves the model in inference mode.
    pub fn calibrate_bn(&mut self, x: &Tensor<E>) -> Result<()> {
        let (was_training, momentum) = (self.training, self.momentum);
        self.training = true;
        self.momentum = 1.0;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let result = self.forward_in(&mut g, xv, None);
        self.training = was_training;
        self.momentum = momentum;
        self.apply_updates(result?.updates)?;
        self.training = false;
        Ok(())
    }

    /// Trainable scalars: conv/linear weights and biases, BN gamma and beta.
    pub fn count_params(&self) -> u64 {
        self.params.count_trainable()
    }

    /// Multiply-accumulates for one image at `resolution`.
    pub fn count_flops(&self, resolution: usize) -> Result<u64> {
        Ok(self.count_parts(resolution)?.iter().map(|p| p.flops).sum())
    }

    fn count_parts(&self, resolution: usize) -> Result<Vec<PartCount>> {
        if resolution == 0 || resolution % 16 != 0 {
            return Err(ModelError::Param(format!(
                "resolution {resolution} must be a positive multiple of 16"
            )));
        }
        let params_under = |prefix: &str| -> u64 {
            let dotted = format!("{prefix}.");
            self.params
                .iter()
                .filter(|(_, n, p)| p.kind.is_trainable() && n.starts_with(&dotted))
                .map(|(_, _, p)| p.tensor.numel() as u64)
                .sum()
        };
        let mut parts = Vec::new();
        let (macs, mut r, _) = self.embed.macs(resolution, resolution);
        parts.push(PartCount {
            name: "embed".into(),
            params: params_under("embed"),
            flops: macs,
        });
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let sub = &self.subsamples[s - 1];
                let name = format!("subsample.{}", s - 1);
                parts.push(PartCount {
                    params: params_under(&name),
                    name,
                    flops: sub.macs(r, r),
                });
                r = sub.out_extent(r);
            }
            let name = format!("stages.{s}");
            parts.push(PartCount {
                params: params_under(&name),
                name,
                flops: blocks.iter().map(|b| b.macs(r, r)).sum(),
            });
        }
        parts.push(PartCount {
            name: "head".into(),
            params: params_under("head"),
            flops: self.head.macs(),
        });
        Ok(parts)
    }

    pub fn count_report(&self, resolution: usize) -> Result<CountReport> {
        let parts = self.count_parts(resolution)?;
        Ok(CountReport {
            spec: self.spec.clone(),
            attention: self.options.attention,
            folded: self.folded,
            resolution,
            params: self.count_params(),
            flops: parts.iter().map(|p| p.flops).sum(),
            parts,
        })
    }

    /// Q/K/V projection weight scalars per stage, summed over the stage's blocks.
    pub fn qkv_weight_counts(&self) -> [u64; 3] {
        let mut out = [0; 3];
        for (s, _, b) in self.blocks() {
            out[s] += b.attn.qkv_weight_count(&self.params);
        }
        out
    }

    /// A new model with every BN absorbed into its neighbouring conv or linear layer.
    pub fn fold_bn(&self) -> Result<Model<E>> {
        if self.training {
            return Err(ModelError::State("fold_bn needs a model in inference mode".into()));
        }
        let old = &self.params;
        let mut new = ParamStore::new();
        let embed = self.embed.fold(old, &mut new)?;
        let mut stages = Vec::with_capacity(3);
        let mut subsamples = Vec::with_capacity(2);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                subsamples.push(self.subsamples[s - 1].fold(old, &mut new)?);
            }
            stages.push(
                blocks
                    .iter()
                    .map(|b| b.fold(old, &mut new))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let head = self.head.fold(old, &mut new)?;
        Ok(Model {
            spec: self.spec.clone(),
            options: self.options,
            params: new,
            embed,
            stages,
            subsamples,
            head,
            folded: true,
            training: false,
            momentum: self.momentum,
        })
    }

    /// Same model with every tensor converted to `F`.
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            spec: self.spec.clone(),
            options: self.options,
            params: self.params.cast(),
            embed: self.embed.clone(),
            stages: self.stages.clone(),
            subsamples: self.subsamples.clone(),
            head: self.head.clone(),
            folded: self.folded,
            training: self.training,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PartCount {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and multiply-accumulate totals, with a per-part breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub spec: ModelSpec,
    pub attention: AttentionKind,
    pub folded: bool,
    pub resolution: usize,
    pub params: u64,
    pub flops: u64,
    pub parts: Vec<PartCount>,
}

impl CountReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "spec        {}", self.spec);
        let _ = writeln!(s, "attention   {}", self.attention.name());
        let _ = writeln!(s, "folded      {}", self.folded);
        let _ = writeln!(s, "resolution  {}", self.resolution);
        let _ = writeln!(
            s,
            "params      {} ({:.2}M)",
            self.params,
            self.params as f64 / 1e6
        );
        let _ = writeln!(s, "flops       {} ({:.1}M MACs)", self.flops, self.flops as f64 / 1e6);
        let _ = writeln!(s, "{:<14}{:>12}{:>14}", "part", "params", "flops");
        for p in &self.parts {
            let _ = writeln!(s, "{:<14}{:>12}{:>14}", p.name, p.params, p.flops);
        }
        s
    }
}
