use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use evit_core::analysis::gradcheck::{gradcheck, GradCheckOptions, GradCheckReport, GradModule};
use evit_core::analysis::importance::{taylor_importance, ImportanceOptions};
use evit_core::analysis::similarity::compare_attention_variants;
use evit_core::analysis::{random_input, random_labels};
use evit_core::bench::{
    profile_model, throughput, BenchOptions, BenchReport, Granularity, ThroughputOptions, ThroughputReport,
};
use evit_core::model::IN_CHANNELS;
use evit_core::{AttentionKind, BuildOptions, CountReport, Format, Model, ModelSpec, Report, Variant};
use evit_tensor::io;
use evit_tensor::{Element, Tensor};

use crate::args::{AttentionArg, Command, DTypeArg, FormatArg, GranularityArg, ModelArgs, ModuleArg, OutputArgs};
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn format(f: FormatArg) -> Format {
    match f {
        FormatArg::Json => Format::Json,
        FormatArg::Table => Format::Table,
        FormatArg::Csv => Format::Csv,
    }
}

fn emit(report: &impl Report, fmt: FormatArg, output: Option<&Path>) -> Result<()> {
    let text = report
        .render(format(fmt))
        .ok_or_else(|| Failure::Input(format!("this report has no {fmt:?} rendering").to_lowercase()))?;
    match output {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        match &self.config {
            Some(path) => {
                let text = String::from_utf8(read(path)?)
                    .map_err(|_| Failure::Input(format!("{}: not UTF-8", path.display())))?;
                Ok(ModelSpec::from_json(&text)?)
            }
            None => Ok(self.variant.unwrap_or(Variant::M0).spec()),
        }
    }

    fn options(&self) -> BuildOptions {
        BuildOptions {
            attention: match self.attention {
                AttentionArg::Cga => AttentionKind::Cascaded,
                AttentionArg::Split => AttentionKind::Split,
                AttentionArg::Mhsa => AttentionKind::Full,
            },
            share_head_weights: self.share_heads,
        }
    }

    fn build<E: Element>(&self) -> Result<Model<E>> {
        Ok(Model::build_with(&self.spec()?, self.options(), self.seed)?)
    }
}

#[derive(Serialize)]
struct Info {
    variant: Option<String>,
    summary: String,
    stage_extents: Vec<usize>,
    qkv_weights: [u64; 3],
    counts: CountReport,
}

impl Report for Info {
    fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(v) = &self.variant {
            let _ = writeln!(s, "EfficientViT-{v}");
        }
        let _ = writeln!(s, "{}", self.summary);
        let _ = writeln!(s, "tokens per stage {:?}", self.stage_extents);
        let _ = writeln!(s, "qkv weights per stage {:?}", self.qkv_weights);
        s.push_str(&self.counts.to_table());
        s
    }
}

fn info(model: &ModelArgs, out: &OutputArgs) -> Result<()> {
    let spec = model.spec()?;
    let m: Model = model.build()?;
    let report = Info {
        variant: model.config.is_none().then(|| model.variant.unwrap_or(Variant::M0).to_string()),
        summary: spec.to_string(),
        stage_extents: spec.stage_extents(spec.input_resolution).to_vec(),
        qkv_weights: m.qkv_weight_counts(),
        counts: m.count_report(spec.input_resolution)?,
    };
    emit(&report, out.format, out.output.as_deref())
}

fn count(model: &ModelArgs, resolution: Option<usize>, out: &OutputArgs) -> Result<()> {
    let m: Model = model.build()?;
    let r = resolution.unwrap_or(m.spec().input_resolution);
    emit(&m.count_report(r)?, out.format, out.output.as_deref())
}

#[derive(Serialize)]
struct ForwardSummary {
    output: PathBuf,
    dtype: String,
    input_dims: Vec<usize>,
    logits_dims: Vec<usize>,
    calibrated: bool,
    /// Argmax class per row.
    predictions: Vec<usize>,
}

impl Report for ForwardSummary {
    fn to_table(&self) -> String {
        format!(
            "input {:?} -> logits {:?} ({}) written to {}\npredictions {:?}\n",
            self.input_dims,
            self.logits_dims,
            self.dtype,
            self.output.display(),
            self.predictions
        )
    }
}

struct ForwardArgs<'a> {
    model: &'a ModelArgs,
    input: Option<&'a Path>,
    batch: usize,
    weights: Option<&'a Path>,
    calibrate: bool,
    output: &'a Path,
}

fn forward<E: Element>(a: &ForwardArgs<'_>) -> Result<ForwardSummary> {
    let spec = a.model.spec()?;
    let mut m: Model<E> = match a.weights {
        Some(p) => Model::load_weights(&spec, a.model.options(), &read(p)?)?,
        None => a.model.build()?,
    };
    let x: Tensor<E> = match a.input {
        Some(p) => io::decode(&read(p)?)?.into_element(),
        None => {
            if a.batch == 0 {
                return Err(Failure::Input("batch must be >= 1".into()));
            }
            let r = spec.input_resolution;
            random_input(a.model.seed, vec![a.batch, IN_CHANNELS, r, r])?
        }
    };
    if a.calibrate {
        m.calibrate_bn(&x)?;
    }
    let logits = m.forward(&x)?;
    write(a.output, &io::encode(&logits)?)?;
    let classes = logits.dims()[1];
    let predictions = logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, E::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    Ok(ForwardSummary {
        output: a.output.to_path_buf(),
        dtype: E::DTYPE.name().to_string(),
        input_dims: x.dims().to_vec(),
        logits_dims: logits.dims().to_vec(),
        calibrated: a.calibrate,
        predictions,
    })
}

#[derive(Serialize)]
struct GradCheckSet {
    passed: bool,
    reports: Vec<GradCheckReport>,
}

impl Report for GradCheckSet {
    fn to_table(&self) -> String {
        let mut s: String = self.reports.iter().map(|r| r.to_table() + "\n").collect();
        let _ = writeln!(s, "{}", if self.passed { "all passed" } else { "FAILED" });
        s
    }

    fn to_csv(&self) -> Option<String> {
        let mut s = String::from("module,tensor,numel,max_rel_error,mean_rel_error\n");
        for r in &self.reports {
            s.extend(r.to_csv()?.lines().skip(1).map(|l| format!("{l}\n")));
        }
        Some(s)
    }
}

fn grad_modules(m: ModuleArg) -> Vec<GradModule> {
    match m {
        ModuleArg::All => GradModule::ALL.to_vec(),
        ModuleArg::Linear => vec![GradModule::Linear],
        ModuleArg::Conv => vec![GradModule::Conv],
        ModuleArg::Dwconv => vec![GradModule::DwConv],
        ModuleArg::Bn => vec![GradModule::Bn],
        ModuleArg::Softmax => vec![GradModule::Softmax],
        ModuleArg::Cga => vec![GradModule::Cga],
        ModuleArg::Sandwich => vec![GradModule::Sandwich],
        ModuleArg::Subsample => vec![GradModule::Subsample],
    }
}

#[derive(Serialize)]
struct BenchOutput {
    profile: BenchReport,
    throughput: ThroughputReport,
}

impl Report for BenchOutput {
    fn to_table(&self) -> String {
        format!("{}\nthroughput {}", self.profile.to_table(), self.throughput.to_table())
    }

    fn to_csv(&self) -> Option<String> {
        self.profile.to_csv()
    }
}

fn bench<E: Element>(model: &ModelArgs, opts: &BenchOptions, tp: &ThroughputOptions, fold: bool) -> Result<BenchOutput> {
    let mut m: Model<E> = model.build()?;
    if fold {
        m = m.fold_bn()?;
    }
    Ok(BenchOutput {
        profile: profile_model(&m, tp.batch, tp.seed, opts)?,
        throughput: throughput(&m, tp)?,
    })
}

#[derive(Serialize)]
struct FoldSummary {
    output: PathBuf,
    params_before: u64,
    params_after: u64,
    tensors_before: usize,
    tensors_after: usize,
}

impl Report for FoldSummary {
    fn to_table(&self) -> String {
        format!(
            "folded {} -> {} params ({} -> {} tensors), written to {}\n",
            self.params_before,
            self.params_after,
            self.tensors_before,
            self.tensors_after,
            self.output.display()
        )
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Info { model, out } => info(&model, &out),
        Command::Count { model, resolution, out } => count(&model, resolution, &out),
        Command::Forward {
            model,
            input,
            batch,
            weights,
            calibrate,
            dtype,
            output,
            format,
        } => {
            let a = ForwardArgs {
                model: &model,
                input: input.as_deref(),
                batch,
                weights: weights.as_deref(),
                calibrate,
                output: &output,
            };
            let summary = match dtype {
                DTypeArg::F32 => forward::<f32>(&a)?,
                DTypeArg::F64 => forward::<f64>(&a)?,
            };
            emit(&summary, format, None)
        }
        Command::Gradcheck {
            module,
            tol,
            eps,
            seed,
            out,
        } => {
            let opts = GradCheckOptions {
                tolerance: tol,
                eps,
                seed,
                corrupt: None,
            };
            let reports = grad_modules(module)
                .into_iter()
                .map(|m| gradcheck(m, &opts))
                .collect::<evit_core::Result<Vec<_>>>()?;
            let set = GradCheckSet {
                passed: reports.iter().all(|r| r.passed),
                reports,
            };
            emit(&set, out.format, out.output.as_deref())?;
            if set.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = set.reports.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
                Err(Failure::Validation(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Similarity { model, batch, out } => {
            let r = compare_attention_variants(&model.spec()?, model.seed, batch)?;
            emit(&r, out.format, out.output.as_deref())
        }
        Command::Importance {
            model,
            batch,
            keep,
            loss_scale,
            out,
        } => {
            let mut m: Model = model.build()?;
            m.set_training(true);
            let r = m.spec().input_resolution;
            let x = random_input(model.seed, vec![batch, IN_CHANNELS, r, r])?;
            let labels = random_labels(model.seed, batch, m.spec().num_classes);
            let opts = ImportanceOptions {
                loss_scale,
                keep_fraction: keep,
            };
            emit(&taylor_importance(&m, &x, &labels, opts)?, out.format, out.output.as_deref())
        }
        Command::Bench {
            model,
            batch,
            warmup,
            repeats,
            threads,
            granularity,
            fold,
            dtype,
            out,
        } => {
            let opts = BenchOptions {
                warmup,
                repeats,
                granularity: match granularity {
                    GranularityArg::Category => Granularity::Category,
                    GranularityArg::Op => Granularity::Op,
                },
            };
            let tp = ThroughputOptions {
                batch,
                warmup,
                repeats,
                threads,
                seed: model.seed,
            };
            let report = match dtype {
                DTypeArg::F32 => bench::<f32>(&model, &opts, &tp, fold)?,
                DTypeArg::F64 => bench::<f64>(&model, &opts, &tp, fold)?,
            };
            emit(&report, out.format, out.output.as_deref())
        }
        Command::Fold {
            model,
            weights,
            save_unfolded,
            output,
            format,
        } => {
            let spec = model.spec()?;
            let m: Model = match &weights {
                Some(p) => Model::load_weights(&spec, model.options(), &read(p)?)?,
                None => model.build()?,
            };
            if let Some(p) = &save_unfolded {
                write(p, &m.save_weights()?)?;
            }
            let folded = m.fold_bn()?;
            write(&output, &folded.save_weights()?)?;
            let summary = FoldSummary {
                output,
                params_before: m.count_params(),
                params_after: folded.count_params(),
                tensors_before: m.params().len(),
                tensors_after: folded.params().len(),
            };
            emit(&summary, format, None)
        }
    }
}

