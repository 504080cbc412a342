use evit_core::analysis::gradcheck::{gradcheck, GradCheckOptions, GradModule};

#[test]
fn every_module_passes_at_default_tolerance() {
    for m in GradModule::ALL {
        let r = gradcheck(m, &GradCheckOptions::default()).unwrap();
        println!("{:<10} max rel {:.3e}", r.module, r.max_rel_error);
        assert!(r.passed, "{}: {:.3e}", r.module, r.max_rel_error);
    }
}

#[test]
fn corrupted_gradient_fails() {
    for m in GradModule::ALL {
        let opts = GradCheckOptions {
            corrupt: Some(2.0),
            ..Default::default()
        };
        let r = gradcheck(m, &opts).unwrap();
        assert!(!r.passed, "{} passed with a doubled gradient", r.module);
        assert!(r.max_rel_error > 1e-3);
    }
}

#[test]
fn linear_passes_at_one_in_a_million() {
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        ..Default::default()
    };
    let r = gradcheck(GradModule::Linear, &opts).unwrap();
    assert!(r.passed, "{:.3e}", r.max_rel_error);
    let names: Vec<&str> = r.tensors.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["fc.weight", "fc.bias", "input"]);
    assert_eq!(r.tensors[0].numel, 24);
}

#[test]
fn several_seeds() {
    for seed in [1, 7, 123] {
        for m in [GradModule::Cga, GradModule::Sandwich, GradModule::Subsample] {
            let r = gradcheck(
                m,
                &GradCheckOptions {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.passed, "{} seed {seed}: {:.3e}", r.module, r.max_rel_error);
        }
    }
}
