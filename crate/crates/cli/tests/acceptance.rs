//! Acceptance suite: one pass/fail line per criterion. Exits non-zero if any fails.

#[path = "../../core/tests/common/attention_oracle.rs"]
mod attention_oracle;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use attention_oracle::{naive_attention, A4};
use evit_core::analysis::gradcheck::{gradcheck, GradCheckOptions, GradModule};
use evit_core::analysis::importance::{scores_from_grads, taylor_importance, ImportanceOptions};
use evit_core::analysis::similarity::{cosine, head_similarity, trace_model};
use evit_core::analysis::{random_input, random_labels};
use evit_core::attention::{AttentionTrace, BlockTrace, GroupAttention, HeadTrace};
use evit_core::bench::{
    profile, profile_model, throughput_compare, AddChainWorkload, BenchOptions, MatmulWorkload, ThroughputOptions,
    TIMING_FIELDS,
};
use evit_core::layers::Cx;
use evit_core::params::ParamBuilder;
use evit_core::{AttentionKind, BuildOptions, Model, ParamKind, ParamStore, Variant};
use evit_tensor::{BnMode, Fill, Graph, Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// Reference widths, depths, heads, and target parameter (M) / FLOP (M) counts.
const TABLE: [(Variant, [usize; 3], [usize; 3], [usize; 3], f64, f64); 6] = [
    (Variant::M0, [64, 128, 192], [1, 2, 3], [4, 4, 4], 2.3, 79.0),
    (Variant::M1, [128, 144, 192], [1, 2, 3], [2, 3, 3], 3.0, 167.0),
    (Variant::M2, [128, 192, 224], [1, 2, 3], [4, 3, 2], 4.2, 201.0),
    (Variant::M3, [128, 240, 320], [1, 2, 3], [4, 3, 4], 6.9, 263.0),
    (Variant::M4, [128, 256, 384], [1, 2, 3], [4, 4, 4], 8.8, 299.0),
    (Variant::M5, [192, 288, 384], [1, 3, 4], [3, 3, 4], 12.4, 522.0),
];

fn rand_tensor(rng: &mut Rng, dims: Vec<usize>) -> Tensor<f32> {
    Tensor::new(dims, Fill::Uniform { rng, lo: -1.0, hi: 1.0 }).unwrap()
}

fn table_fidelity() -> Outcome {
    for (v, w, d, h, _, _) in TABLE {
        let m = Model::<f32>::variant(v, 0).map_err(|e| e.to_string())?;
        let s = m.spec();
        ensure!(s.widths == w && s.depths == d && s.heads == h, "{v}: built {s}");
        let depths: Vec<usize> = m.stages.iter().map(|b| b.len()).collect();
        ensure!(depths == d, "{v}: {depths:?} blocks per stage");
        for (stage, blocks) in m.stages.iter().enumerate() {
            for b in blocks {
                ensure!(b.attn.dim == w[stage] && b.attn.num_heads == h[stage], "{v} stage {stage} block mismatch");
            }
        }
    }
    Ok("all six variants match".into())
}

fn param_counts() -> Outcome {
    let mut notes = Vec::new();
    for (v, _, _, _, want, _) in TABLE {
        let got = Model::<f32>::variant(v, 0).unwrap().count_params() as f64 / 1e6;
        let dev = got / want - 1.0;
        notes.push(format!("{v} {got:.2}M ({:+.1}%)", dev * 100.0));
        ensure!(dev.abs() <= 0.10, "{v}: {got:.3}M vs {want}M");
    }
    Ok(notes.join(", "))
}

fn flop_counts() -> Outcome {
    let mut notes = Vec::new();
    for (v, _, _, _, _, want) in TABLE {
        let got = Model::<f32>::variant(v, 0).unwrap().count_flops(224).unwrap() as f64 / 1e6;
        let dev = got / want - 1.0;
        notes.push(format!("{v} {got:.0}M ({:+.1}%)", dev * 100.0));
        ensure!(dev.abs() <= 0.15, "{v}: {got:.1}M vs {want}M");
    }
    Ok(notes.join(", "))
}

fn cga_reduction() -> Outcome {
    for v in Variant::ALL {
        let spec = v.spec();
        let build = |attention| {
            Model::<f32>::build_with(
                &spec,
                BuildOptions {
                    attention,
                    share_head_weights: false,
                },
                0,
            )
            .unwrap()
            .qkv_weight_counts()
        };
        let (c, f) = (build(AttentionKind::Cascaded), build(AttentionKind::Full));
        for s in 0..3 {
            ensure!(
                f[s] % spec.heads[s] as u64 == 0 && c[s] == f[s] / spec.heads[s] as u64,
                "{v} stage {s}: cga {} vs full {} / {}",
                c[s],
                f[s],
                spec.heads[s]
            );
        }
    }
    Ok("exact for 6 variants x 3 stages".into())
}

fn gradient_soundness() -> Outcome {
    let opts = GradCheckOptions {
        tolerance: 1e-4,
        ..Default::default()
    };
    let mut notes = Vec::new();
    for m in GradModule::ALL {
        let r = gradcheck(m, &opts).map_err(|e| e.to_string())?;
        notes.push(format!("{} {:.1e}", r.module, r.max_rel_error));
        ensure!(r.passed, "{}: max rel error {:e}", r.module, r.max_rel_error);
    }
    Ok(notes.join(", "))
}

fn run_attention(store: &ParamStore<f32>, a: &GroupAttention, x: &Tensor<f32>) -> (Tensor<f32>, AttentionTrace<f32>) {
    let mut trace = AttentionTrace::new();
    let mut g = Graph::inference();
    let vars = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut cx = Cx::new(&mut g, &vars, BnMode::Infer).with_trace(&mut trace);
    let y = a.forward(&mut cx, xv).unwrap();
    (g.value(y).clone(), trace)
}

fn build_attention(dim: usize, heads: usize, qk: usize, kind: AttentionKind, seed: u64) -> (ParamStore<f32>, GroupAttention) {
    let mut store = ParamStore::new();
    let a = GroupAttention::build(&mut ParamBuilder::new(&mut store, &mut Rng::new(seed)), dim, heads, qk, 3, kind, false)
        .unwrap();
    (store, a)
}

fn attention_oracle() -> Outcome {
    let mut rng = Rng::new(606);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let kind = if inst % 2 == 0 { AttentionKind::Cascaded } else { AttentionKind::Full };
        let heads = 1 + rng.index(4);
        let dim = heads * (2 + 2 * rng.index(2));
        let qk = [4, 8, 16][rng.index(3)];
        let (h, w, b) = (2 + rng.index(4), 2 + rng.index(4), 1 + rng.index(2));
        let (mut store, a) = build_attention(dim, heads, qk, kind, inst);
        store.randomize(&mut rng, true).unwrap();
        let x = rand_tensor(&mut rng, vec![b, dim, h, w]);
        let (y, _) = run_attention(&store, &a, &x);
        let (oracle, _) = naive_attention(&store, &a, &A4::from(&x));
        let err = y.to_f64_vec().iter().zip(&oracle.v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        ensure!(err < 1e-5, "instance {inst} ({kind:?}, C={dim}, h={heads}, {h}x{w}): {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("20 instances, worst abs error {worst:.1e}"))
}

fn bn_folding() -> Outcome {
    let mut m = Model::<f32>::variant(Variant::M0, 42).unwrap();
    m.calibrate_bn(&random_input(42, vec![8, 3, 224, 224]).unwrap()).unwrap();
    let folded = m.fold_bn().map_err(|e| e.to_string())?;
    let mut rng = Rng::new(7);
    let mut worst: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, vec![1, 3, 224, 224]);
        let (a, b) = (m.forward(&x).unwrap(), folded.forward(&x).unwrap());
        worst = worst.max(a.max_abs_diff(&b));
        peak = a.data().iter().fold(peak, |p, &v| p.max(v.abs() as f64));
    }
    ensure!(worst < 1e-4, "max abs logit diff {worst:e}");
    let opts = ThroughputOptions {
        batch: 1,
        warmup: 2,
        repeats: 41,
        threads: 1,
        seed: 42,
    };
    let t = throughput_compare(&[&m, &folded], &opts).unwrap();
    let (plain, fast, speedup) = (t[0].images_per_sec, t[1].images_per_sec, t[1].speedup);
    ensure!(
        speedup >= 1.0,
        "folded paired speedup {speedup:.3}x ({plain:.1} vs {fast:.1} img/s; logits ok, max diff {worst:.1e})"
    );
    Ok(format!(
        "max diff {worst:.1e} (logit scale {peak:.2}), {plain:.1} -> {fast:.1} img/s, paired speedup {speedup:.3}x"
    ))
}

fn cascade_semantics() -> Outcome {
    let mut rng = Rng::new(808);
    let x = rand_tensor(&mut rng, vec![2, 8, 4, 4]);
    let split1 = A4::from(&x).channels(4, 4).v;

    let (mut store, a) = build_attention(8, 2, 16, AttentionKind::Cascaded, 1);
    let head0: Vec<_> = store
        .iter()
        .filter(|(_, n, p)| n.starts_with("heads.0.") && p.kind == ParamKind::Weight)
        .map(|(id, _, p)| (id, p.tensor.dims().to_vec()))
        .collect();
    for (id, dims) in head0 {
        store.set(id, Tensor::zeros(dims).unwrap()).unwrap();
    }
    let (_, t) = run_attention(&store, &a, &x);
    ensure!(t.blocks[0].heads[1].input.to_f64_vec() == split1, "head 2 input is not its raw split");

    let run = |kind| {
        let (mut s, a) = build_attention(8, 2, 16, kind, 2);
        s.randomize(&mut Rng::new(3), false).unwrap();
        run_attention(&s, &a, &x).0
    };
    let (on, off) = (run(AttentionKind::Cascaded), run(AttentionKind::Split));
    let diff = on.max_abs_diff(&off);
    ensure!(diff > 0.0, "cascade on and off give identical outputs");
    Ok(format!("zeroed head 1 adds exactly zero; on/off max diff {diff:.2e}"))
}

fn similarity() -> Outcome {
    let opts = BuildOptions {
        attention: AttentionKind::Full,
        share_head_weights: true,
    };
    let mut m = Model::<f32>::build_with(&Variant::M0.spec(), opts, 42).unwrap();
    let x = random_input(42, vec![2, 3, 224, 224]).unwrap();
    let r = head_similarity(&trace_model(&mut m, &x).unwrap()).unwrap();
    for b in &r.blocks {
        for v in &b.heads {
            ensure!((v - 1.0).abs() <= 1e-6, "stage {} block {}: {v}", b.stage, b.block);
        }
    }
    // Direct dot/norm formula on random traces.
    let mut rng = Rng::new(909);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 2 + rng.index(6);
        let maps: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::new(vec![1, n, n], Fill::Uniform { rng: &mut rng, lo: 0.0, hi: 1.0 }).unwrap())
            .collect();
        let trace = AttentionTrace {
            blocks: vec![BlockTrace {
                stage: 0,
                block: 0,
                heads: maps
                    .iter()
                    .map(|t| HeadTrace {
                        attention: t.clone(),
                        input: t.clone(),
                        output: t.clone(),
                    })
                    .collect(),
            }],
        };
        let got = head_similarity(&trace).unwrap();
        for i in 0..3 {
            let mut best = f64::MIN;
            for j in (0..3).filter(|&j| j != i) {
                let (a, b) = (maps[i].data(), maps[j].data());
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
                best = best.max(dot / (na * nb));
            }
            worst = worst.max((got.blocks[0].heads[i] - best).abs());
        }
    }
    ensure!(worst < 1e-6, "cosine oracle disagreement {worst:e}");
    ensure!(cosine(&[1.0, 0.0], &[0.0, 2.0]) == 0.0, "orthogonal cosine");
    Ok(format!(
        "shared-weight control = 1 in all {} blocks; oracle diff {worst:.1e}",
        r.blocks.len()
    ))
}

fn taylor() -> Outcome {
    // Linear regression with outputs masked by m: loss = 0.5 * sum((m * (W x + b) - y)^2).
    let w = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75, 0.3, 0.6, -0.9];
    let bias = [0.1, -0.2, 0.4];
    let mask = [1.0, 1.0, 0.0];
    let xs = [[1.0, 2.0, -1.0], [0.5, -0.5, 3.0]];
    let ys = [[1.0, 0.0, 0.0], [-2.0, 1.0, 0.0]];
    let mut store = ParamStore::<f64>::new();
    let lin = ParamBuilder::new(&mut store, &mut Rng::new(0)).linear("fc", 3, 3, true).unwrap();
    store.set(lin.weight, Tensor::from_f64_slice(vec![3, 3], &w).unwrap()).unwrap();
    store.set(lin.bias.unwrap(), Tensor::from_f64_slice(vec![3], &bias).unwrap()).unwrap();
    let mut g = Graph::new();
    let vars = store.bind(&mut g, true);
    let xv = g.constant(Tensor::from_f64_slice(vec![2, 3], &xs.concat()).unwrap());
    let mut cx = Cx::new(&mut g, &vars, BnMode::Infer);
    let out = lin.forward(&mut cx, xv).unwrap();
    let mv = g.constant(Tensor::from_f64_slice(vec![1, 3], &mask).unwrap());
    let out = g.mul(out, mv).unwrap();
    let neg: Vec<f64> = ys.concat().iter().map(|v| -v).collect();
    let ny = g.constant(Tensor::from_f64_slice(vec![2, 3], &neg).unwrap());
    let d = g.add(out, ny).unwrap();
    let sq = g.mul(d, d).unwrap();
    let s = g.sum_all(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    g.backward(loss).unwrap();
    let scores = scores_from_grads(&store, |id| g.grad(vars[id.index()]).cloned()).unwrap();
    let mut worst: f64 = 0.0;
    for o in 0..3 {
        let mut hand = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let r = mask[o] * ((0..3).map(|i| w[o * 3 + i] * x[i]).sum::<f64>() + bias[o]) - y[o];
            hand += (0..3).map(|i| w[o * 3 + i] * mask[o] * r * x[i]).sum::<f64>();
        }
        worst = worst.max((scores[0].scores[o] - hand.abs()).abs());
    }
    ensure!(worst < 1e-6, "regression oracle disagreement {worst:e}");
    ensure!(scores[0].scores[2] == 0.0, "masked channel scored {}", scores[0].scores[2]);

    let mut m = Model::<f64>::variant(Variant::M0, 42).unwrap();
    m.set_training(true);
    let x = random_input(42, vec![2, 3, 224, 224]).unwrap();
    let labels = random_labels(42, 2, 1000);
    let base = taylor_importance(&m, &x, &labels, ImportanceOptions::default()).unwrap();
    for k in [2.0, 3.0, -0.25] {
        let opts = ImportanceOptions {
            loss_scale: k,
            ..Default::default()
        };
        let r = taylor_importance(&m, &x, &labels, opts).unwrap();
        for (a, b) in base.tensors.iter().zip(&r.tensors) {
            ensure!(a.ranking == b.ranking, "{}: ranking changed under loss scale {k}", a.name);
        }
    }
    Ok(format!(
        "oracle diff {worst:.1e}; masked channel 0; M0 rankings stable over {} tensors",
        base.tensors.len()
    ))
}

fn bench_harness() -> Outcome {
    let opts = BenchOptions::default();
    let mut rng = Rng::new(1);
    let mm = profile(
        &MatmulWorkload {
            a: rand_tensor(&mut rng, vec![96, 96]),
            b: rand_tensor(&mut rng, vec![96, 96]),
        },
        &opts,
    )
    .unwrap();
    ensure!(mm.compute_fraction == 1.0 && mm.memory_bound_fraction == 0.0, "matmul-only workload not all compute");
    let add = profile(
        &AddChainWorkload {
            x: rand_tensor(&mut rng, vec![128, 128]),
            steps: 16,
        },
        &opts,
    )
    .unwrap();
    ensure!(add.memory_bound_fraction == 1.0, "add chain not all memory-bound");
    let m = Model::<f32>::variant(Variant::M0, 42).unwrap();
    let r = profile_model(&m, 1, 42, &opts).unwrap();
    let sum: f64 = r.categories.iter().map(|c| c.fraction).sum();
    ensure!((sum - 1.0).abs() <= 0.01, "fractions sum to {sum}");
    ensure!(
        r.instrumentation_overhead < 0.20,
        "instrumentation overhead {:.1}%",
        r.instrumentation_overhead * 100.0
    );
    Ok(format!(
        "M0 b1 {:.1} ms, memory-bound {:.1}%, overhead {:+.1}%",
        r.median_forward_secs * 1e3,
        r.memory_bound_fraction * 100.0,
        r.instrumentation_overhead * 100.0
    ))
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !TIMING_FIELDS.contains(&k.as_str()));
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn evit(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evit"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "evit {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let commands: [&[&str]; 10] = [
        &["info", "--variant", "M1"],
        &["count", "--variant", "M5", "--format", "csv"],
        &["forward", "--variant", "M0", "--seed", "42", "-o", "logits.evt1"],
        &["forward", "--variant", "M0", "--seed", "42", "--dtype", "f64", "--calibrate", "--batch", "2", "-o", "l64.evt1"],
        &["gradcheck", "--module", "cga", "--tol", "1e-4"],
        &["similarity", "--variant", "M0", "--seed", "7"],
        &["importance", "--variant", "M0", "--seed", "7", "--format", "csv"],
        &["fold", "--variant", "M0", "-o", "folded.evtw", "--save-unfolded", "plain.evtw"],
        &["forward", "--weights", "folded.evtw", "-o", "from_folded.evt1"],
        &["bench", "--variant", "M0", "--repeats", "3", "--granularity", "op"],
    ];
    let files = ["logits.evt1", "l64.evt1", "folded.evtw", "plain.evtw", "from_folded.evt1"];
    let mut first = Vec::new();
    let mut first_files = Vec::new();
    for round in 0..2 {
        for args in commands {
            let mut out = evit(d, args)?;
            if args[0] == "bench" {
                let mut v: serde_json::Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
                strip_timing(&mut v);
                out = v.to_string().into_bytes();
            }
            if round == 0 {
                first.push(out);
            } else {
                let i = commands.iter().position(|c| *c == args).unwrap();
                ensure!(first[i] == out, "stdout of `evit {}` differs between runs", args.join(" "));
            }
        }
        for f in files {
            let bytes = std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"))?;
            if round == 0 {
                first_files.push(bytes);
            } else {
                let i = files.iter().position(|x| *x == f).unwrap();
                ensure!(first_files[i] == bytes, "{f} differs between runs");
            }
        }
    }
    Ok(format!("{} commands and {} artifacts byte-identical", commands.len(), files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 12] = [
        ("table fidelity", table_fidelity, Some(Duration::from_secs(1))),
        ("parameter counts", param_counts, Some(Duration::from_secs(5))),
        ("FLOP counts", flop_counts, Some(Duration::from_secs(5))),
        ("CGA h-fold QKV reduction", cga_reduction, None),
        ("gradient soundness", gradient_soundness, Some(Duration::from_secs(120))),
        ("attention oracle", attention_oracle, Some(Duration::from_secs(30))),
        ("BN folding", bn_folding, None),
        ("cascade semantics", cascade_semantics, None),
        ("similarity analyzer", similarity, None),
        ("Taylor scorer", taylor, None),
        ("bench harness", bench_harness, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let mut outcome = check();
        let elapsed = t0.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if elapsed > limit {
                outcome = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
