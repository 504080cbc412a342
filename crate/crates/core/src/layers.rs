//! Primitive layers and the forward context they run in.

use evit_tensor::{BnMode, BnVars, Conv2dParams, Element, Graph, Tensor, Var};

use crate::attention::AttentionTrace;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::{ModelError, Result};

/// State threaded through one forward pass.
pub struct Cx<'a, E: Element> {
    pub g: &'a mut Graph<E>,
    vars: &'a [Var],
    mode: BnMode,
    updates: Vec<(ParamId, Tensor<E>)>,
    pub(crate) trace: Option<&'a mut AttentionTrace<E>>,
    pub(crate) location: (usize, usize),
}

impl<'a, E: Element> Cx<'a, E> {
    /// `vars` must come from [`ParamStore::bind`] on the store the layers were built into.
    pub fn new(g: &'a mut Graph<E>, vars: &'a [Var], mode: BnMode) -> Self {
        Cx {
            g,
            vars,
            mode,
            updates: Vec::new(),
            trace: None,
            location: (0, 0),
        }
    }

    pub fn with_trace(mut self, trace: &'a mut AttentionTrace<E>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Sets the (stage, block) label attached to attention traces.
    pub fn set_location(&mut self, stage: usize, block: usize) {
        self.location = (stage, block);
    }

    /// New running statistics produced by training-mode BN layers so far.
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<E>)> {
        std::mem::take(&mut self.updates)
    }

    pub fn batchnorm(&mut self, bn: &Bn, x: Var) -> Result<Var> {
        let vars = BnVars {
            gamma: self.var(bn.gamma),
            beta: self.var(bn.beta),
            running_mean: self.var(bn.running_mean),
            running_var: self.var(bn.running_var),
        };
        let (y, update) = self.g.batchnorm(x, vars, self.mode, bn.eps)?;
        if let Some(u) = update {
            self.updates.push((bn.running_mean, u.mean));
            self.updates.push((bn.running_var, u.var));
        }
        Ok(y)
    }
}

/// Batch-norm parameters over `channels`.
#[derive(Clone, Debug)]
pub struct Bn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl Bn {
    /// Per-channel `(scale, shift)` with `bn(x) = scale * x + shift` in inference mode.
    pub fn affine<E: Element>(&self, store: &ParamStore<E>) -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |id: ParamId, kind: ParamKind| -> Result<Vec<f64>> {
            let p = store.param(id);
            if p.kind != kind || p.tensor.dims() != [self.channels] {
                return Err(ModelError::Structure(format!(
                    "{}: expected {kind:?} of {} channels, found {:?} {:?}",
                    store.name(id),
                    self.channels,
                    p.kind,
                    p.tensor.dims()
                )));
            }
            Ok(p.tensor.to_f64_vec())
        };
        let gamma = get(self.gamma, ParamKind::BnGamma)?;
        let beta = get(self.beta, ParamKind::BnBeta)?;
        let mean = get(self.running_mean, ParamKind::RunningMean)?;
        let var = get(self.running_var, ParamKind::RunningVar)?;
        let scale: Vec<f64> = gamma
            .iter()
            .zip(&var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = beta
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok((scale, shift))
    }
}

/// Convolution with an optional bias and an optional trailing BN.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<Bn>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvBn {
    pub fn conv_params(&self) -> Conv2dParams {
        Conv2dParams::new(self.stride, self.pad, self.groups)
    }

    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weight), self.bias.map(|b| cx.var(b)));
        let y = cx.g.conv2d(x, w, b, self.conv_params())?;
        match &self.bn {
            Some(bn) => cx.batchnorm(bn, y),
            None => Ok(y),
        }
    }

    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Multiply-accumulates for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let per_pixel = self.cout * (self.cin / self.groups) * self.kernel * self.kernel;
        (per_pixel * self.out_extent(h) * self.out_extent(w)) as u64
    }

    pub fn weight_count(&self) -> u64 {
        (self.cout * (self.cin / self.groups) * self.kernel * self.kernel) as u64
    }

    /// Copies this layer into `new`, absorbing the BN into weight and bias.
    pub fn fold<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<ConvBn> {
        let Some(bn) = &self.bn else {
            return Ok(ConvBn {
                weight: copy(old, new, self.weight)?,
                bias: self.bias.map(|b| copy(old, new, b)).transpose()?,
                ..self.clone()
            });
        };
        let wname = old.name(self.weight).to_string();
        let w = old.tensor(self.weight);
        if bn.channels != self.cout || w.dims().first() != Some(&self.cout) {
            return Err(ModelError::Structure(format!(
                "{wname}: BN over {} channels cannot fold into a conv with {} outputs",
                bn.channels, self.cout
            )));
        }
        let (scale, shift) = bn.affine(old)?;
        let per = w.numel() / self.cout;
        let wd: Vec<f64> = w
            .to_f64_vec()
            .chunks_exact(per)
            .zip(&scale)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let b0 = match self.bias {
            Some(b) => old.tensor(b).to_f64_vec(),
            None => vec![0.0; self.cout],
        };
        let bd: Vec<f64> = (0..self.cout).map(|c| b0[c] * scale[c] + shift[c]).collect();
        let bname = match self.bias {
            Some(b) => old.name(b).to_string(),
            None => sibling(&wname, "bias"),
        };
        let weight = new.insert(wname, Tensor::from_f64_slice(w.dims().to_vec(), &wd)?, ParamKind::Weight)?;
        let bias = new.insert(bname, Tensor::from_f64_slice(vec![self.cout], &bd)?, ParamKind::Bias)?;
        Ok(ConvBn {
            weight,
            bias: Some(bias),
            bn: None,
            ..self.clone()
        })
    }
}

/// Fully connected layer over `[B, fan_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<E: Element>(&self, cx: &mut Cx<'_, E>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weight), self.bias.map(|b| cx.var(b)));
        Ok(cx.g.linear(x, w, b)?)
    }

    pub fn macs(&self) -> u64 {
        (self.fan_in * self.fan_out) as u64
    }

    pub fn copy<E: Element>(&self, old: &ParamStore<E>, new: &mut ParamStore<E>) -> Result<Linear> {
        Ok(Linear {
            weight: copy(old, new, self.weight)?,
            bias: self.bias.map(|b| copy(old, new, b)).transpose()?,
            ..self.clone()
        })
    }
}

pub(crate) fn copy<E: Element>(old: &ParamStore<E>, new: &mut ParamStore<E>, id: ParamId) -> Result<ParamId> {
    let p = old.param(id);
    new.insert(old.name(id), p.tensor.clone(), p.kind)
}

/// `a.b.weight` -> `a.b.<leaf>`.
pub(crate) fn sibling(name: &str, leaf: &str) -> String {
    match name.rsplit_once('.') {
        Some((head, _)) => format!("{head}.{leaf}"),
        None => leaf.to_string(),
    }
}
