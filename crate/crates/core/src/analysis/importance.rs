use std::fmt::Write as _;

use serde::Serialize;

use evit_tensor::{Element, Graph, Tensor};

use crate::model::Model;
use crate::params::{ParamKind, ParamStore};
use crate::report::Report;
use crate::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Query and key projections.
    QueryKey,
    Value,
    Ffn,
    /// Everything else, including the depthwise conv applied to Q.
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::QueryKey, ParamGroup::Value, ParamGroup::Ffn, ParamGroup::Other];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::QueryKey => "qk",
            ParamGroup::Value => "v",
            ParamGroup::Ffn => "ffn",
            ParamGroup::Other => "other",
        }
    }

    /// Classifies a parameter by the segments of its dotted name.
    pub fn of(name: &str) -> ParamGroup {
        let segs: Vec<&str> = name.split('.').collect();
        if segs.contains(&"heads") {
            if segs.contains(&"q") || segs.contains(&"k") {
                return ParamGroup::QueryKey;
            }
            if segs.contains(&"v") {
                return ParamGroup::Value;
            }
        }
        if segs.contains(&"ffn") {
            return ParamGroup::Ffn;
        }
        ParamGroup::Other
    }
}

/// `|sum(w * g)|` over each output channel (leading axis) of a weight tensor.
pub fn channel_scores<E: Element>(weight: &Tensor<E>, grad: &Tensor<E>) -> Result<Vec<f64>> {
    if weight.dims() != grad.dims() || weight.ndim() == 0 {
        return Err(ModelError::Input(format!(
            "weight {:?} and gradient {:?} must share a non-scalar shape",
            weight.dims(),
            grad.dims()
        )));
    }
    let out = weight.dims()[0];
    let per = weight.numel() / out.max(1);
    let (w, g) = (weight.data(), grad.data());
    Ok((0..out)
        .map(|c| {
            let s: f64 = (c * per..(c + 1) * per).map(|i| w[i].to_f64() * g[i].to_f64()).sum();
            s.abs()
        })
        .collect())
}

/// Channel indices from most to least important; ties keep index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorImportance {
    pub name: String,
    pub group: ParamGroup,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRetention {
    pub group: ParamGroup,
    pub channels: usize,
    pub retained: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub batch: usize,
    pub loss: f64,
    pub loss_scale: f64,
    pub keep_fraction: f64,
    pub tensors: Vec<TensorImportance>,
    pub retention: Vec<GroupRetention>,
}

impl ImportanceReport {
    /// Share of each group's channels that survive when the `keep_fraction`
    /// highest-scoring channels across all tensors are kept.
    pub fn retention(&self, keep_fraction: f64) -> Result<Vec<GroupRetention>> {
        if !(0.0..=1.0).contains(&keep_fraction) {
            return Err(ModelError::Param(format!("keep fraction {keep_fraction} outside [0, 1]")));
        }
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (t, ti) in self.tensors.iter().enumerate() {
            all.extend(ti.scores.iter().enumerate().map(|(c, &s)| (s, t, c)));
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let keep = (keep_fraction * all.len() as f64).round() as usize;
        let mut out = Vec::new();
        for group in ParamGroup::ALL {
            let channels: usize = self
                .tensors
                .iter()
                .filter(|t| t.group == group)
                .map(|t| t.scores.len())
                .sum();
            if channels == 0 {
                continue;
            }
            let retained = all[..keep].iter().filter(|e| self.tensors[e.1].group == group).count();
            out.push(GroupRetention {
                group,
                channels,
                retained,
                fraction: retained as f64 / channels as f64,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportanceOptions {
    /// Multiplies the loss before backpropagation.
    pub loss_scale: f64,
    pub keep_fraction: f64,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        ImportanceOptions {
            loss_scale: 1.0,
            keep_fraction: 0.5,
        }
    }
}

/// Scores every weight tensor of `store` from gradients looked up by parameter.
pub fn scores_from_grads<E: Element>(
    store: &ParamStore<E>,
    grad: impl Fn(crate::ParamId) -> Option<Tensor<E>>,
) -> Result<Vec<TensorImportance>> {
    let mut out = Vec::new();
    for (id, name, p) in store.iter() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let g = grad(id).ok_or_else(|| ModelError::State(format!("no gradient reached {name}")))?;
        let scores = channel_scores(&p.tensor, &g)?;
        out.push(TensorImportance {
            name: name.to_string(),
            group: ParamGroup::of(name),
            ranking: rank_desc(&scores),
            scores,
        });
    }
    Ok(out)
}

/// First-order Taylor channel importance from one labelled batch under cross-entropy.
/// BN runs in training mode, so the batch needs at least two samples.
pub fn taylor_importance<E: Element>(
    model: &Model<E>,
    x: &Tensor<E>,
    labels: &[usize],
    opts: ImportanceOptions,
) -> Result<ImportanceReport> {
    if !model.is_training() {
        return Err(ModelError::State("importance needs a model in training mode".into()));
    }
    if model.is_folded() {
        return Err(ModelError::State("importance needs an unfolded model".into()));
    }
    let batch = x.dims().first().copied().unwrap_or(0);
    if batch < 2 {
        return Err(ModelError::Param(format!("importance needs batch >= 2, got {batch}")));
    }
    if labels.len() != batch {
        return Err(ModelError::Input(format!("{} labels for batch {batch}", labels.len())));
    }
    if !opts.loss_scale.is_finite() || opts.loss_scale == 0.0 {
        return Err(ModelError::Param(format!("loss scale {} must be finite and nonzero", opts.loss_scale)));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = model.forward_in(&mut g, xv, None)?;
    let ce = g.cross_entropy(pass.logits, labels)?;
    let loss_value = g.value(ce).item()?.to_f64();
    let loss = if opts.loss_scale == 1.0 { ce } else { g.scale(ce, opts.loss_scale)? };
    g.backward(loss)?;
    let tensors = scores_from_grads(model.params(), |id| g.grad(pass.params[id.index()]).cloned())?;
    let mut report = ImportanceReport {
        batch,
        loss: loss_value,
        loss_scale: opts.loss_scale,
        keep_fraction: opts.keep_fraction,
        tensors,
        retention: Vec::new(),
    };
    report.retention = report.retention(opts.keep_fraction)?;
    Ok(report)
}

impl Report for ImportanceReport {
    fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch {}  loss {:.6}  keep {:.2}", self.batch, self.loss, self.keep_fraction);
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", "group", "channels", "retained", "fraction");
        for r in &self.retention {
            let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10.4}", r.group.name(), r.channels, r.retained, r.fraction);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<56}{:<7}{:>6}{:>14}{:>14}", "tensor", "group", "out", "mean", "max");
        for t in &self.tensors {
            let mean = t.scores.iter().sum::<f64>() / t.scores.len().max(1) as f64;
            let max = t.scores.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(
                s,
                "{:<56}{:<7}{:>6}{:>14.6e}{:>14.6e}",
                t.name,
                t.group.name(),
                t.scores.len(),
                mean,
                max
            );
        }
        s
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("tensor,group,channel,score,rank\n");
        for t in &self.tensors {
            let mut rank = vec![0; t.scores.len()];
            for (r, &c) in t.ranking.iter().enumerate() {
                rank[c] = r;
            }
            for (c, v) in t.scores.iter().enumerate() {
                let _ = writeln!(s, "{},{},{c},{v:.9e},{}", t.name, t.group.name(), rank[c]);
            }
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_name() {
        assert_eq!(ParamGroup::of("stages.0.0.attn.heads.0.q.conv.weight"), ParamGroup::QueryKey);
        assert_eq!(ParamGroup::of("stages.0.0.attn.heads.3.k.conv.weight"), ParamGroup::QueryKey);
        assert_eq!(ParamGroup::of("stages.0.0.attn.heads.1.v.conv.weight"), ParamGroup::Value);
        assert_eq!(ParamGroup::of("stages.0.0.attn.heads.1.q_dw.conv.weight"), ParamGroup::Other);
        assert_eq!(ParamGroup::of("stages.1.0.pre.0.ffn.expand.conv.weight"), ParamGroup::Ffn);
        assert_eq!(ParamGroup::of("head.linear.weight"), ParamGroup::Other);
    }

    #[test]
    fn scores_sum_each_output_channel() {
        let w = Tensor::<f64>::from_f64_slice(vec![2, 2], &[1.0, 2.0, 0.0, 0.0]).unwrap();
        let g = Tensor::<f64>::from_f64_slice(vec![2, 2], &[-3.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(channel_scores(&w, &g).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_desc(&[1.0, 3.0, 1.0, 2.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn retention_counts_kept_channels() {
        let t = |name: &str, scores: Vec<f64>| TensorImportance {
            name: name.into(),
            group: ParamGroup::of(name),
            ranking: rank_desc(&scores),
            scores,
        };
        let r = ImportanceReport {
            batch: 2,
            loss: 0.0,
            loss_scale: 1.0,
            keep_fraction: 0.5,
            tensors: vec![
                t("a.heads.0.q.conv.weight", vec![4.0, 3.0]),
                t("a.ffn.expand.conv.weight", vec![1.0, 2.0]),
            ],
            retention: vec![],
        };
        let ret = r.retention(0.5).unwrap();
        assert_eq!(ret[0].group, ParamGroup::QueryKey);
        assert_eq!(ret[0].retained, 2);
        assert_eq!(ret[1].retained, 0);
        assert!(r.retention(1.5).is_err());
    }
}
