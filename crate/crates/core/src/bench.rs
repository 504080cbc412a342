//! Operator-category profiling and throughput measurement.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use evit_tensor::{Element, Graph, OpCategory, OpKind, OpProfile, Tensor};

use crate::analysis::random_input;
use crate::model::{Model, IN_CHANNELS};
use crate::report::Report;
use crate::{ModelError, Result};

/// Something that can be run repeatedly inside a fresh inference graph.
pub trait Workload<E: Element> {
    fn name(&self) -> String;
    fn batch(&self) -> usize;
    fn run(&self, g: &mut Graph<E>) -> Result<()>;
}

/// One model forward on a fixed batch.
pub struct ModelWorkload<'a, E: Element> {
    pub model: &'a Model<E>,
    pub input: Tensor<E>,
}

impl<'a, E: Element> ModelWorkload<'a, E> {
    /// Inference-mode model only; timing a training forward would mix in BN statistics.
    pub fn new(model: &'a Model<E>, batch: usize, seed: u64) -> Result<Self> {
        if model.is_training() {
            return Err(ModelError::Contract("profiling needs a model in inference mode".into()));
        }
        if batch == 0 {
            return Err(ModelError::Param("batch must be >= 1".into()));
        }
        let r = model.spec().input_resolution;
        Ok(ModelWorkload {
            model,
            input: random_input(seed, vec![batch, IN_CHANNELS, r, r])?,
        })
    }
}

impl<E: Element> Workload<E> for ModelWorkload<'_, E> {
    fn name(&self) -> String {
        format!(
            "{}{}",
            self.model.spec(),
            if self.model.is_folded() { " folded" } else { "" }
        )
    }

    fn batch(&self) -> usize {
        self.input.dims()[0]
    }

    fn run(&self, g: &mut Graph<E>) -> Result<()> {
        let x = g.constant(self.input.clone());
        self.model.forward_in(g, x, None)?;
        Ok(())
    }
}

/// A single matrix product; all time is compute.
pub struct MatmulWorkload<E: Element> {
    pub a: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Element> Workload<E> for MatmulWorkload<E> {
    fn name(&self) -> String {
        format!("matmul {:?}x{:?}", self.a.dims(), self.b.dims())
    }

    fn batch(&self) -> usize {
        1
    }

    fn run(&self, g: &mut Graph<E>) -> Result<()> {
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        g.matmul(a, b)?;
        Ok(())
    }
}

/// `steps` chained additions; all time is elementwise.
pub struct AddChainWorkload<E: Element> {
    pub x: Tensor<E>,
    pub steps: usize,
}

impl<E: Element> Workload<E> for AddChainWorkload<E> {
    fn name(&self) -> String {
        format!("add chain {} x {:?}", self.steps, self.x.dims())
    }

    fn batch(&self) -> usize {
        1
    }

    fn run(&self, g: &mut Graph<E>) -> Result<()> {
        let x = g.constant(self.x.clone());
        let mut h = x;
        for _ in 0..self.steps {
            h = g.add(h, x)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Category,
    Op,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
    pub granularity: Granularity,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 1,
            repeats: 5,
            granularity: Granularity::Category,
        }
    }
}

impl BenchOptions {
    fn validate(&self) -> Result<()> {
        if self.warmup < 1 {
            return Err(ModelError::Param("warmup must be >= 1".into()));
        }
        if self.repeats < 3 {
            return Err(ModelError::Param(format!("repeats must be >= 3, got {}", self.repeats)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub dtype: String,
    pub threads: usize,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    pub memory_bound: bool,
    pub calls: u64,
    pub median_secs: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpRow {
    pub op: String,
    pub category: String,
    pub calls: u64,
    pub median_secs: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub workload: String,
    pub environment: Environment,
    pub total_calls: u64,
    pub categories: Vec<CategoryRow>,
    /// Filled only at op granularity.
    pub ops: Vec<OpRow>,
    pub memory_bound_fraction: f64,
    pub compute_fraction: f64,
    pub median_forward_secs: f64,
    pub median_instrumented_secs: f64,
    /// Instrumented over plain median wall time, minus one.
    pub instrumentation_overhead: f64,
    pub images_per_sec: f64,
}

/// Report fields that depend on wall time. Everything else is a pure function
/// of the workload and options.
pub const TIMING_FIELDS: &[&str] = &[
    "median_secs",
    "fraction",
    "memory_bound_fraction",
    "compute_fraction",
    "median_forward_secs",
    "median_instrumented_secs",
    "instrumentation_overhead",
    "images_per_sec",
    "speedup",
];

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn fresh_graph<E: Element>() -> Graph<E> {
    let mut g = Graph::inference();
    g.set_check_finite(false);
    g
}

fn time_run<E: Element, W: Workload<E> + ?Sized>(w: &W, profile: bool) -> Result<(Duration, Option<OpProfile>)> {
    let mut g = fresh_graph();
    if profile {
        g.enable_profiling();
    }
    let t0 = Instant::now();
    w.run(&mut g)?;
    let elapsed = t0.elapsed();
    Ok((elapsed, g.take_profile()))
}

/// Times `w` plainly and with per-op instrumentation, alternating, and
/// attributes instrumented time to operator categories by median.
pub fn profile<E: Element, W: Workload<E> + ?Sized>(w: &W, opts: &BenchOptions) -> Result<BenchReport> {
    opts.validate()?;
    for _ in 0..opts.warmup {
        time_run(w, false)?;
    }
    let mut plain = Vec::with_capacity(opts.repeats);
    let mut instrumented = Vec::with_capacity(opts.repeats);
    let mut profiles = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        plain.push(time_run(w, false)?.0.as_secs_f64());
        let (t, p) = time_run(w, true)?;
        instrumented.push(t.as_secs_f64());
        profiles.push(p.expect("profiling enabled"));
    }

    let cat_medians: Vec<f64> = OpCategory::ALL
        .iter()
        .map(|&c| median(&mut profiles.iter().map(|p| p.by_category(c).time.as_secs_f64()).collect::<Vec<_>>()))
        .collect();
    let total: f64 = cat_medians.iter().sum();
    let frac = |t: f64| if total > 0.0 { t / total } else { 0.0 };
    let last = profiles.last().expect("repeats >= 3");
    let categories: Vec<CategoryRow> = OpCategory::ALL
        .iter()
        .zip(&cat_medians)
        .map(|(&c, &t)| CategoryRow {
            category: c.name().to_string(),
            memory_bound: c.is_memory_bound(),
            calls: last.by_category(c).calls,
            median_secs: t,
            fraction: frac(t),
        })
        .collect();
    let ops = match opts.granularity {
        Granularity::Category => Vec::new(),
        Granularity::Op => OpKind::ALL
            .iter()
            .filter(|&&k| last.get(k).calls > 0)
            .map(|&k| {
                let t = median(&mut profiles.iter().map(|p| p.get(k).time.as_secs_f64()).collect::<Vec<_>>());
                OpRow {
                    op: k.name().to_string(),
                    category: k.category().name().to_string(),
                    calls: last.get(k).calls,
                    median_secs: t,
                    fraction: frac(t),
                }
            })
            .collect(),
    };
    let memory_bound_fraction = categories.iter().filter(|c| c.memory_bound).map(|c| c.fraction).sum();
    let compute_fraction = categories
        .iter()
        .find(|c| c.category == OpCategory::Compute.name())
        .map_or(0.0, |c| c.fraction);
    let median_forward_secs = median(&mut plain);
    let median_instrumented_secs = median(&mut instrumented);
    Ok(BenchReport {
        workload: w.name(),
        environment: Environment {
            dtype: E::DTYPE.name().to_string(),
            threads: 1,
            batch: w.batch(),
            warmup: opts.warmup,
            repeats: opts.repeats,
        },
        total_calls: last.total_calls(),
        categories,
        ops,
        memory_bound_fraction,
        compute_fraction,
        median_forward_secs,
        median_instrumented_secs,
        instrumentation_overhead: median_instrumented_secs / median_forward_secs - 1.0,
        images_per_sec: w.batch() as f64 / median_forward_secs,
    })
}

/// Profiles one inference forward of `model` at `batch`.
pub fn profile_model<E: Element>(model: &Model<E>, batch: usize, seed: u64, opts: &BenchOptions) -> Result<BenchReport> {
    profile(&ModelWorkload::new(model, batch, seed)?, opts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThroughputOptions {
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Worker threads; the batch is split between them.
    pub threads: usize,
    pub seed: u64,
}

impl Default for ThroughputOptions {
    fn default() -> Self {
        ThroughputOptions {
            batch: 1,
            warmup: 1,
            repeats: 5,
            threads: 1,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub model: String,
    pub folded: bool,
    pub environment: Environment,
    pub median_secs: f64,
    pub images_per_sec: f64,
    /// Median over rounds of the first model's time divided by this model's
    /// time in the same round. Paired, so it is far steadier than a ratio of
    /// medians on a noisy machine.
    pub speedup: f64,
}

fn chunks<E: Element>(x: &Tensor<E>, threads: usize) -> Result<Vec<Tensor<E>>> {
    let dims = x.dims();
    let (b, per) = (dims[0], x.numel() / dims[0]);
    let t = threads.min(b);
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for i in 0..t {
        let n = b / t + usize::from(i < b % t);
        let mut d = dims.to_vec();
        d[0] = n;
        out.push(Tensor::from_vec(d, x.data()[start * per..(start + n) * per].to_vec())?);
        start += n;
    }
    Ok(out)
}

fn timed_forward<E: Element>(model: &Model<E>, parts: &[Tensor<E>]) -> Result<f64> {
    let run = |x: &Tensor<E>| -> Result<()> {
        let mut g = fresh_graph();
        let xv = g.constant(x.clone());
        model.forward_in(&mut g, xv, None)?;
        Ok(())
    };
    let t0 = Instant::now();
    if parts.len() == 1 {
        run(&parts[0])?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts.iter().map(|p| s.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("forward thread panicked"))
        })?;
    }
    Ok(t0.elapsed().as_secs_f64())
}

/// Images per second for each model, timed in interleaved rounds so that
/// drift in machine load affects all of them alike.
pub fn throughput_compare<E: Element>(models: &[&Model<E>], opts: &ThroughputOptions) -> Result<Vec<ThroughputReport>> {
    if opts.batch == 0 {
        return Err(ModelError::Param("batch must be >= 1".into()));
    }
    if opts.threads == 0 {
        return Err(ModelError::Param("threads must be >= 1".into()));
    }
    BenchOptions {
        warmup: opts.warmup,
        repeats: opts.repeats,
        granularity: Granularity::Category,
    }
    .validate()?;
    let mut inputs = Vec::with_capacity(models.len());
    for m in models {
        if m.is_training() {
            return Err(ModelError::Contract("throughput needs models in inference mode".into()));
        }
        let r = m.spec().input_resolution;
        inputs.push(chunks(&random_input::<E>(opts.seed, vec![opts.batch, IN_CHANNELS, r, r])?, opts.threads)?);
    }
    for _ in 0..opts.warmup {
        for (m, x) in models.iter().zip(&inputs) {
            timed_forward(m, x)?;
        }
    }
    let mut times = vec![Vec::with_capacity(opts.repeats); models.len()];
    for round in 0..opts.repeats {
        // Alternate the order so no model always runs first.
        let mut order: Vec<usize> = (0..models.len()).collect();
        if round % 2 == 1 {
            order.reverse();
        }
        for i in order {
            times[i].push(timed_forward(models[i], &inputs[i])?);
        }
    }
    let base = times[0].clone();
    Ok(models
        .iter()
        .zip(times)
        .map(|(m, mut t)| {
            let mut ratios: Vec<f64> = base.iter().zip(&t).map(|(b, x)| b / x).collect();
            let speedup = median(&mut ratios);
            let med = median(&mut t);
            ThroughputReport {
                model: m.spec().to_string(),
                folded: m.is_folded(),
                environment: Environment {
                    dtype: E::DTYPE.name().to_string(),
                    threads: opts.threads.min(opts.batch),
                    batch: opts.batch,
                    warmup: opts.warmup,
                    repeats: opts.repeats,
                },
                median_secs: med,
                images_per_sec: opts.batch as f64 / med,
                speedup,
            }
        })
        .collect())
}

pub fn throughput<E: Element>(model: &Model<E>, opts: &ThroughputOptions) -> Result<ThroughputReport> {
    Ok(throughput_compare(&[model], opts)?.remove(0))
}

impl Report for BenchReport {
    fn to_table(&self) -> String {
        let mut s = String::new();
        let e = &self.environment;
        let _ = writeln!(s, "{}", self.workload);
        let _ = writeln!(
            s,
            "dtype {}  threads {}  batch {}  warmup {}  repeats {}",
            e.dtype, e.threads, e.batch, e.warmup, e.repeats
        );
        let _ = writeln!(s, "{:<16}{:>8}{:>14}{:>10}", "category", "calls", "median ms", "share");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{:<16}{:>8}{:>14.3}{:>9.1}%",
                c.category,
                c.calls,
                c.median_secs * 1e3,
                c.fraction * 100.0
            );
        }
        for o in &self.ops {
            let _ = writeln!(s, "  {:<14}{:>8}{:>14.3}{:>9.1}%", o.op, o.calls, o.median_secs * 1e3, o.fraction * 100.0);
        }
        let _ = writeln!(s, "memory-bound share {:.1}%", self.memory_bound_fraction * 100.0);
        let _ = writeln!(
            s,
            "forward {:.3} ms ({:.1} img/s), instrumented {:.3} ms, overhead {:+.1}%",
            self.median_forward_secs * 1e3,
            self.images_per_sec,
            self.median_instrumented_secs * 1e3,
            self.instrumentation_overhead * 100.0
        );
        s
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("level,name,category,memory_bound,calls,median_secs,fraction\n");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "category,{},{},{},{},{:e},{:.6}",
                c.category, c.category, c.memory_bound, c.calls, c.median_secs, c.fraction
            );
        }
        for o in &self.ops {
            let _ = writeln!(s, "op,{},{},,{},{:e},{:.6}", o.op, o.category, o.calls, o.median_secs, o.fraction);
        }
        Some(s)
    }
}

impl Report for ThroughputReport {
    fn to_table(&self) -> String {
        format!(
            "{}{}  dtype {}  threads {}  batch {}: {:.3} ms, {:.1} img/s, {:.3}x paired\n",
            self.model,
            if self.folded { " (folded)" } else { "" },
            self.environment.dtype,
            self.environment.threads,
            self.environment.batch,
            self.median_secs * 1e3,
            self.images_per_sec,
            self.speedup
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn chunks_cover_the_batch() {
        let x = Tensor::<f32>::from_vec(vec![5, 2], (0..10).map(|v| v as f32).collect()).unwrap();
        let parts = chunks(&x, 2).unwrap();
        assert_eq!(parts[0].dims(), &[3, 2]);
        assert_eq!(parts[1].data(), &[6.0, 7.0, 8.0, 9.0]);
        assert_eq!(chunks(&x, 9).unwrap().len(), 5);
    }

    #[test]
    fn options_are_validated() {
        let w = MatmulWorkload {
            a: Tensor::<f32>::ones(vec![2, 2]).unwrap(),
            b: Tensor::<f32>::ones(vec![2, 2]).unwrap(),
        };
        let bad = BenchOptions {
            repeats: 2,
            ..Default::default()
        };
        assert!(matches!(profile(&w, &bad), Err(ModelError::Param(_))));
        let bad = BenchOptions {
            warmup: 0,
            ..Default::default()
        };
        assert!(matches!(profile(&w, &bad), Err(ModelError::Param(_))));
    }
}
