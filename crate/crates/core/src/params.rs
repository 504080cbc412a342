//! Named parameter registry and the builder that fills it.

use indexmap::map::Entry;
use indexmap::IndexMap;
use serde::Serialize;

use evit_tensor::{Element, Fill, Graph, Rng, Tensor, Var};

use crate::layers::{Bn, ConvBn, Linear};
use crate::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not learnable parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Position of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub tensor: Tensor<E>,
    pub kind: ParamKind,
}

/// Insertion-ordered map from unique name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    entries: IndexMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>, kind: ParamKind) -> Result<ParamId> {
        match self.entries.entry(name.into()) {
            Entry::Occupied(e) => Err(ModelError::Structure(format!(
                "duplicate parameter name {:?}",
                e.key()
            ))),
            Entry::Vacant(e) => {
                let id = ParamId(e.index());
                e.insert(Param { tensor, kind });
                Ok(id)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("param id in range").0
    }

    pub fn param(&self, id: ParamId) -> &Param<E> {
        self.entries.get_index(id.0).expect("param id in range").1
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.param(id).tensor
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.entries.get(name)
    }

    /// Replaces a tensor, keeping its kind. The new tensor must have the same shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<E>) -> Result<()> {
        let (name, p) = self.entries.get_index_mut(id.0).expect("param id in range");
        if p.tensor.dims() != tensor.dims() {
            return Err(ModelError::Structure(format!(
                "{name}: shape {:?} does not match {:?}",
                tensor.dims(),
                p.tensor.dims()
            )));
        }
        p.tensor = tensor.with_requires_grad(false);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| ModelError::Structure(format!("no parameter named {name:?}")))?;
        self.set(id, tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<E>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    /// Scalar count of trainable tensors (running statistics excluded).
    pub fn count_trainable(&self) -> u64 {
        self.iter()
            .filter(|(_, _, p)| p.kind.is_trainable())
            .map(|(_, _, p)| p.tensor.numel() as u64)
            .sum()
    }

    /// Adds every tensor to `g` as a leaf. Trainable ones require a gradient when `grad` is set.
    pub fn bind(&self, g: &mut Graph<E>, grad: bool) -> Vec<Var> {
        self.entries
            .values()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(grad && p.kind.is_trainable())))
            .collect()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrites every tensor with O(1) uniform values: weights in
    /// `±1/sqrt(fan_in)`, gamma in `[0.5, 1.5)`, biases and beta in `[-0.5, 0.5)`.
    /// Running statistics are redrawn (mean in `[-0.5, 0.5)`, variance in
    /// `[0.5, 1.5)`) only when `stats` is set.
    pub fn randomize(&mut self, rng: &mut Rng, stats: bool) -> Result<()> {
        for p in self.entries.values_mut() {
            let dims = p.tensor.dims().to_vec();
            let (lo, hi) = match p.kind {
                ParamKind::Weight => {
                    let fan_in = dims[1..].iter().product::<usize>().max(1) as f64;
                    let a = 1.0 / fan_in.sqrt();
                    (-a, a)
                }
                ParamKind::BnGamma => (0.5, 1.5),
                ParamKind::Bias | ParamKind::BnBeta => (-0.5, 0.5),
                ParamKind::RunningMean if stats => (-0.5, 0.5),
                ParamKind::RunningVar if stats => (0.5, 1.5),
                ParamKind::RunningMean | ParamKind::RunningVar => continue,
            };
            p.tensor = Tensor::new(dims, Fill::Uniform { rng: &mut *rng, lo, hi })?;
        }
        Ok(())
    }

    /// True when both stores hold the same names, kinds and bit-identical tensors in order.
    pub fn bit_eq(&self, other: &ParamStore<E>) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb && a.kind == b.kind && a.tensor.bit_eq(&b.tensor)
            })
    }
}

pub const WEIGHT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;

/// Creates parameters under a dotted name prefix, drawing weights from one [`Rng`].
///
/// Weights are truncated normal (std 0.02), biases zero, BN gamma one and beta
/// zero, running mean zero and running variance one.
pub struct ParamBuilder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut Rng,
    prefix: Vec<String>,
}

impl<'a, E: Element> ParamBuilder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: impl ToString, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn add(&mut self, leaf: &str, tensor: Tensor<E>, kind: ParamKind) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.insert(name, tensor, kind)
    }

    pub fn weight(&mut self, leaf: &str, dims: Vec<usize>) -> Result<ParamId> {
        let t = Tensor::new(
            dims,
            Fill::TruncNormal {
                rng: self.rng,
                std: WEIGHT_STD,
            },
        )?;
        self.add(leaf, t, ParamKind::Weight)
    }

    pub fn bias(&mut self, leaf: &str, n: usize) -> Result<ParamId> {
        self.add(leaf, Tensor::zeros(vec![n])?, ParamKind::Bias)
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> Result<Bn> {
        self.scope(name, |b| {
            Ok(Bn {
                gamma: b.add("gamma", Tensor::ones(vec![channels])?, ParamKind::BnGamma)?,
                beta: b.add("beta", Tensor::zeros(vec![channels])?, ParamKind::BnBeta)?,
                running_mean: b.add("running_mean", Tensor::zeros(vec![channels])?, ParamKind::RunningMean)?,
                running_var: b.add("running_var", Tensor::ones(vec![channels])?, ParamKind::RunningVar)?,
                channels,
                eps: BN_EPS,
            })
        })
    }

    /// `k x k` convolution followed by BN; the conv has no bias.
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<ConvBn> {
        self.scope(name, |b| {
            let mut c = b.conv_inner(cin, cout, k, stride, groups, false)?;
            c.bn = Some(b.bn("bn", cout)?);
            Ok(c)
        })
    }

    /// Plain convolution with an optional bias and no BN.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<ConvBn> {
        self.scope(name, |b| b.conv_inner(cin, cout, k, stride, groups, bias))
    }

    fn conv_inner(
        &mut self,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<ConvBn> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(ModelError::Structure(format!(
                "{}: {cin} -> {cout} channels not divisible by {groups} groups",
                self.full_name("conv")
            )));
        }
        let weight = self.weight("conv.weight", vec![cout, cin / groups, k, k])?;
        let bias = if bias { Some(self.bias("conv.bias", cout)?) } else { None };
        Ok(ConvBn {
            weight,
            bias,
            bn: None,
            cin,
            cout,
            kernel: k,
            stride,
            pad: k / 2,
            groups,
        })
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        self.scope(name, |b| {
            Ok(Linear {
                weight: b.weight("weight", vec![fan_out, fan_in])?,
                bias: if bias { Some(b.bias("bias", fan_out)?) } else { None },
                fan_in,
                fan_out,
            })
        })
    }
}
