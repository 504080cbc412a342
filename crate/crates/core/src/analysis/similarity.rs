use std::fmt::Write as _;

use serde::Serialize;

use evit_tensor::Element;

use crate::analysis::random_input;
use crate::attention::{AttentionKind, AttentionTrace};
use crate::model::{BuildOptions, Model, IN_CHANNELS};
use crate::report::Report;
use crate::spec::ModelSpec;
use crate::{ModelError, Result};

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`; 0 if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine length");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSimilarity {
    pub stage: usize,
    pub block: usize,
    /// Per head, the largest cosine similarity to any other head of the block.
    /// Empty for single-head blocks.
    pub heads: Vec<f64>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub blocks: Vec<BlockSimilarity>,
    /// Mean of the block means over blocks with at least two heads.
    pub overall_mean: Option<f64>,
    /// Blocks skipped because they have a single head.
    pub single_head_blocks: usize,
}

/// Batch-averaged attention map of every head, flattened.
fn head_vectors<E: Element>(heads: &[crate::attention::HeadTrace<E>]) -> Vec<Vec<f64>> {
    heads
        .iter()
        .map(|h| {
            let d = h.attention.dims();
            let (b, per) = (d[0], h.attention.numel() / d[0]);
            let data = h.attention.data();
            (0..per)
                .map(|i| (0..b).map(|k| data[k * per + i].to_f64()).sum::<f64>() / b as f64)
                .collect()
        })
        .collect()
}

pub fn head_similarity<E: Element>(trace: &AttentionTrace<E>) -> Result<SimilarityReport> {
    if trace.is_empty() {
        return Err(ModelError::Input("attention trace has no blocks".into()));
    }
    let mut blocks = Vec::with_capacity(trace.blocks.len());
    let mut single = 0;
    for bt in &trace.blocks {
        let vecs = head_vectors(&bt.heads);
        let heads: Vec<f64> = if vecs.len() < 2 {
            single += 1;
            Vec::new()
        } else {
            (0..vecs.len())
                .map(|i| {
                    (0..vecs.len())
                        .filter(|&j| j != i)
                        .map(|j| cosine(&vecs[i], &vecs[j]))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        };
        let mean = (!heads.is_empty()).then(|| heads.iter().sum::<f64>() / heads.len() as f64);
        blocks.push(BlockSimilarity {
            stage: bt.stage,
            block: bt.block,
            heads,
            mean,
        });
    }
    let means: Vec<f64> = blocks.iter().filter_map(|b| b.mean).collect();
    let overall_mean = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
    Ok(SimilarityReport {
        blocks,
        overall_mean,
        single_head_blocks: single,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl Report for SimilarityReport {
    fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8}{:<8}{:<12}max-cos per head", "stage", "block", "mean");
        for b in &self.blocks {
            let heads: Vec<String> = b.heads.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                s,
                "{:<8}{:<8}{:<12}{}",
                b.stage + 1,
                b.block,
                opt(b.mean),
                if heads.is_empty() { "(single head)".into() } else { heads.join(" ") }
            );
        }
        let _ = writeln!(s, "overall mean {}", opt(self.overall_mean));
        s
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("block,stage,stage_block,head,max_cos\n");
        for (i, b) in self.blocks.iter().enumerate() {
            for (h, v) in b.heads.iter().enumerate() {
                let _ = writeln!(s, "{i},{},{},{h},{v:.9}", b.stage + 1, b.block);
            }
        }
        Some(s)
    }
}

/// Runs a traced forward after calibrating BN statistics on the same batch.
pub fn trace_model<E: Element>(model: &mut Model<E>, x: &evit_tensor::Tensor<E>) -> Result<AttentionTrace<E>> {
    model.calibrate_bn(x)?;
    let mut trace = AttentionTrace::new();
    model.forward_traced(x, &mut trace)?;
    Ok(trace)
}

/// Cascaded group attention and full-feature attention on the same spec, seed and batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionComparison {
    pub seed: u64,
    pub batch: usize,
    /// False when some stage has a single head and contributes no values.
    pub full_coverage: bool,
    pub cga: SimilarityReport,
    pub mhsa: SimilarityReport,
}

/// Untrained weights carry no accuracy meaning, so no verdict is attached.
pub fn compare_attention_variants(spec: &ModelSpec, seed: u64, batch: usize) -> Result<AttentionComparison> {
    if batch == 0 {
        return Err(ModelError::Param("batch must be >= 1".into()));
    }
    let r = spec.input_resolution;
    let x = random_input::<f32>(seed, vec![batch, IN_CHANNELS, r, r])?;
    let report = |attention| -> Result<SimilarityReport> {
        let options = BuildOptions {
            attention,
            share_head_weights: false,
        };
        let mut m = Model::<f32>::build_with(spec, options, seed)?;
        head_similarity(&trace_model(&mut m, &x)?)
    };
    Ok(AttentionComparison {
        seed,
        batch,
        full_coverage: spec.heads.iter().all(|&h| h >= 2),
        cga: report(AttentionKind::Cascaded)?,
        mhsa: report(AttentionKind::Full)?,
    })
}

impl Report for AttentionComparison {
    fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}  batch {}  full coverage {}", self.seed, self.batch, self.full_coverage);
        let _ = writeln!(s, "{:<8}{:<8}{:<12}{:<12}", "stage", "block", "cga", "mhsa");
        for (a, b) in self.cga.blocks.iter().zip(&self.mhsa.blocks) {
            let _ = writeln!(s, "{:<8}{:<8}{:<12}{:<12}", a.stage + 1, a.block, opt(a.mean), opt(b.mean));
        }
        let _ = writeln!(
            s,
            "{:<16}{:<12}{:<12}",
            "overall",
            opt(self.cga.overall_mean),
            opt(self.mhsa.overall_mean)
        );
        s
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("variant,block,stage,stage_block,head,max_cos\n");
        for (name, r) in [("cga", &self.cga), ("mhsa", &self.mhsa)] {
            for (i, b) in r.blocks.iter().enumerate() {
                for (h, v) in b.heads.iter().enumerate() {
                    let _ = writeln!(s, "{name},{i},{},{},{h},{v:.9}", b.stage + 1, b.block);
                }
            }
        }
        Some(s)
    }
}
