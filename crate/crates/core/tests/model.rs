use evit_core::weights::decode_weights;
use evit_core::{AttentionKind, BuildOptions, Model, ModelError, ModelSpec, Variant};
use evit_tensor::{Fill, Rng, Tensor, TensorError};

// Reference widths, depths, heads, and target parameter/FLOP counts.
const TABLE: [(Variant, [usize; 3], [usize; 3], [usize; 3], f64, f64); 6] = [
    (Variant::M0, [64, 128, 192], [1, 2, 3], [4, 4, 4], 2.3, 79.0),
    (Variant::M1, [128, 144, 192], [1, 2, 3], [2, 3, 3], 3.0, 167.0),
    (Variant::M2, [128, 192, 224], [1, 2, 3], [4, 3, 2], 4.2, 201.0),
    (Variant::M3, [128, 240, 320], [1, 2, 3], [4, 3, 4], 6.9, 263.0),
    (Variant::M4, [128, 256, 384], [1, 2, 3], [4, 4, 4], 8.8, 299.0),
    (Variant::M5, [192, 288, 384], [1, 3, 4], [3, 3, 4], 12.4, 522.0),
];

fn input(seed: u64, dims: Vec<usize>) -> Tensor<f32> {
    Tensor::new(dims, Fill::Uniform { rng: &mut Rng::new(seed), lo: -1.0, hi: 1.0 }).unwrap()
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        widths: [16, 32, 48],
        depths: [1, 1, 1],
        heads: [2, 2, 2],
        input_resolution: 32,
        num_classes: 10,
        ..ModelSpec::default()
    }
}

#[test]
fn variants_match_the_architecture_table() {
    for (v, w, d, h, _, _) in TABLE {
        let m = Model::<f32>::variant(v, 0).unwrap();
        assert_eq!(m.spec().widths, w, "{v}");
        assert_eq!(m.spec().depths, d, "{v}");
        assert_eq!(m.spec().heads, h, "{v}");
        let built: Vec<usize> = m.stages.iter().map(|s| s.len()).collect();
        assert_eq!(built, d.to_vec());
        for (s, blocks) in m.stages.iter().enumerate() {
            for b in blocks {
                assert_eq!((b.attn.dim, b.attn.num_heads), (w[s], h[s]));
            }
        }
    }
}

#[test]
fn counts_are_near_reference_values() {
    for (v, _, _, _, params_m, flops_m) in TABLE {
        let m = Model::<f32>::variant(v, 0).unwrap();
        let p = m.count_params() as f64 / 1e6;
        let f = m.count_flops(224).unwrap() as f64 / 1e6;
        assert!((p / params_m - 1.0).abs() <= 0.10, "{v} params {p:.3}M vs {params_m}M");
        assert!((f / flops_m - 1.0).abs() <= 0.15, "{v} flops {f:.1}M vs {flops_m}M");
    }
}

#[test]
fn count_report_parts_add_up() {
    let m = Model::<f32>::variant(Variant::M2, 0).unwrap();
    let r = m.count_report(224).unwrap();
    assert_eq!(r.parts.iter().map(|p| p.params).sum::<u64>(), r.params);
    assert_eq!(r.parts.iter().map(|p| p.flops).sum::<u64>(), r.flops);
    assert_eq!(r.params, m.count_params());
}

#[test]
fn flops_scale_with_resolution() {
    let m = Model::<f32>::variant(Variant::M0, 0).unwrap();
    let f224 = m.count_flops(224).unwrap();
    let f448 = m.count_flops(448).unwrap();
    // Convolutions scale by 4, attention by 16.
    assert!(f448 > 4 * f224);
    assert!(m.count_flops(100).is_err());
}

#[test]
fn cascaded_qkv_is_full_attention_over_heads() {
    for v in Variant::ALL {
        let spec = v.spec();
        let opts = |attention| BuildOptions {
            attention,
            share_head_weights: false,
        };
        let cga = Model::<f32>::build_with(&spec, opts(AttentionKind::Cascaded), 0).unwrap();
        let full = Model::<f32>::build_with(&spec, opts(AttentionKind::Full), 0).unwrap();
        let (c, f) = (cga.qkv_weight_counts(), full.qkv_weight_counts());
        for s in 0..3 {
            assert_eq!(c[s] * spec.heads[s] as u64, f[s], "{v} stage {s}");
        }
    }
}

#[test]
fn shared_heads_keep_one_parameter_set() {
    let spec = tiny_spec();
    let opts = BuildOptions {
        attention: AttentionKind::Full,
        share_head_weights: true,
    };
    let shared = Model::<f32>::build_with(&spec, opts, 0).unwrap();
    let full = Model::<f32>::build_with(&spec, BuildOptions { share_head_weights: false, ..opts }, 0).unwrap();
    let (s, f) = (shared.qkv_weight_counts(), full.qkv_weight_counts());
    for i in 0..3 {
        assert_eq!(s[i] * 2, f[i]);
    }
}

#[test]
fn forward_shape_and_determinism() {
    let spec = tiny_spec();
    let a = Model::<f32>::build(&spec, 42).unwrap();
    let b = Model::<f32>::build(&spec, 42).unwrap();
    assert!(a.params().bit_eq(b.params()));
    let x = input(1, vec![3, 3, 32, 32]);
    let ya = a.forward(&x).unwrap();
    assert_eq!(ya.dims(), &[3, 10]);
    assert!(ya.bit_eq(&b.forward(&x).unwrap()));
    let c = Model::<f32>::build(&spec, 43).unwrap();
    assert!(!a.params().bit_eq(c.params()));
}

#[test]
fn wrong_input_is_rejected() {
    let m = Model::<f32>::build(&tiny_spec(), 0).unwrap();
    for dims in [vec![1, 3, 64, 64], vec![1, 1, 32, 32], vec![3, 32, 32]] {
        assert!(matches!(
            m.forward(&input(0, dims)),
            Err(ModelError::Tensor(TensorError::ShapeMismatch { .. }))
        ));
    }
}

#[test]
fn batch_rows_are_independent_in_inference() {
    let m = Model::<f32>::build(&tiny_spec(), 5).unwrap();
    let x = input(2, vec![2, 3, 32, 32]);
    let both = m.forward(&x).unwrap();
    let first = Tensor::from_vec(vec![1, 3, 32, 32], x.data()[..3 * 32 * 32].to_vec()).unwrap();
    let one = m.forward(&first).unwrap();
    for i in 0..10 {
        assert!((both.data()[i] - one.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn calibration_sets_running_statistics() {
    let mut m = Model::<f32>::build(&tiny_spec(), 0).unwrap();
    let x = input(3, vec![4, 3, 32, 32]);
    m.calibrate_bn(&x).unwrap();
    assert!(!m.is_training());
    let mean = m.params().get("embed.0.bn.running_mean").unwrap();
    assert!(mean.tensor.data().iter().any(|&v| v != 0.0));
    let raw = Model::<f32>::build(&tiny_spec(), 0).unwrap();
    let peak = |t: Tensor<f32>| t.data().iter().fold(0f32, |a, &v| a.max(v.abs()));
    assert!(peak(m.forward(&x).unwrap()) > 100.0 * peak(raw.forward(&x).unwrap()));
}

#[test]
fn folding_preserves_logits() {
    let mut m = Model::<f32>::variant(Variant::M0, 7).unwrap();
    m.calibrate_bn(&input(10, vec![4, 3, 224, 224])).unwrap();
    let folded = m.fold_bn().unwrap();
    assert!(folded.is_folded());
    assert!(folded.count_params() < m.count_params());
    let x = input(11, vec![2, 3, 224, 224]);
    let (a, b) = (m.forward(&x).unwrap(), folded.forward(&x).unwrap());
    let scale = a.data().iter().fold(0f32, |s, &v| s.max(v.abs()));
    assert!(scale > 1e-3, "calibrated logits should not be degenerate ({scale})");
    assert!(a.max_abs_diff(&b) < 1e-4, "{}", a.max_abs_diff(&b));
    // Nothing left to fold.
    let again = folded.fold_bn().unwrap();
    assert!(again.forward(&x).unwrap().bit_eq(&b));
}

#[test]
fn folding_in_training_mode_is_refused() {
    let mut m = Model::<f32>::build(&tiny_spec(), 0).unwrap();
    m.set_training(true);
    assert!(matches!(m.fold_bn(), Err(ModelError::State(_))));
}

#[test]
fn weights_round_trip() {
    let spec = tiny_spec();
    let mut m = Model::<f32>::build(&spec, 9).unwrap();
    m.calibrate_bn(&input(4, vec![2, 3, 32, 32])).unwrap();
    let x = input(5, vec![2, 3, 32, 32]);
    let bytes = m.save_weights().unwrap();
    let back = Model::<f32>::load_weights(&spec, m.options(), &bytes).unwrap();
    assert!(back.params().bit_eq(m.params()));
    assert!(back.forward(&x).unwrap().bit_eq(&m.forward(&x).unwrap()));
    assert_eq!(back.save_weights().unwrap(), bytes);

    let folded = m.fold_bn().unwrap();
    let fb = folded.save_weights().unwrap();
    let back = Model::<f32>::load_weights(&spec, m.options(), &fb).unwrap();
    assert!(back.is_folded());
    assert!(back.forward(&x).unwrap().bit_eq(&folded.forward(&x).unwrap()));
}

#[test]
fn weights_for_another_spec_are_a_structure_error() {
    let bytes = Model::<f32>::build(&tiny_spec(), 0).unwrap().save_weights().unwrap();
    let other = ModelSpec {
        depths: [1, 2, 1],
        ..tiny_spec()
    };
    let err = Model::<f32>::load_weights(&other, BuildOptions::default(), &bytes);
    assert!(matches!(err, Err(ModelError::Structure(_))));
}

#[test]
fn corrupt_weights_report_offsets() {
    let bytes = Model::<f32>::build(&tiny_spec(), 0).unwrap().save_weights().unwrap();
    assert!(decode_weights(&bytes).is_ok());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_weights(&bad), Err(ModelError::Io(_))));
    let cut = &bytes[..bytes.len() - 3];
    let msg = decode_weights(cut).unwrap_err().to_string();
    assert!(msg.contains("offset"), "{msg}");
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_weights(&long).is_err());
}

#[test]
fn f64_model_matches_f32() {
    let m = Model::<f32>::build(&tiny_spec(), 3).unwrap();
    let m64 = m.cast::<f64>();
    let x = input(6, vec![1, 3, 32, 32]);
    let a = m.forward(&x).unwrap();
    let b = m64.forward(&x.cast()).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((*p as f64 - q).abs() < 1e-5);
    }
}
