use evit_tensor::kernels::{self, conv_output_extent};
use evit_tensor::{broadcast_shapes, Rng, Shape, Tensor};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 0..4)
}

proptest! {
    #[test]
    fn broadcast_is_commutative(a in dims(), b in dims()) {
        let ab = broadcast_shapes("t", &a, &b);
        let ba = broadcast_shapes("t", &b, &a);
        prop_assert_eq!(ab.is_ok(), ba.is_ok());
        if let (Ok(x), Ok(y)) = (ab, ba) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn broadcasting_against_ones_is_identity(a in dims()) {
        let ones = vec![1; a.len()];
        prop_assert_eq!(broadcast_shapes("t", &a, &ones).unwrap(), a);
    }

    #[test]
    fn strides_index_every_element_once(a in dims()) {
        let s = Shape::new(a.clone()).unwrap();
        let strides = s.strides();
        let max: usize = a.iter().zip(&strides).map(|(d, st)| (d - 1) * st).sum();
        prop_assert_eq!(max + 1, s.numel());
    }

    #[test]
    fn reduce_to_shape_preserves_total(a in dims(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let full: Vec<usize> = a.iter().map(|d| d + 1).collect();
        let target: Vec<usize> = full.iter().map(|&d| if rng.index(2) == 0 { 1 } else { d }).collect();
        let g = Tensor::<f64>::from_vec(
            full.clone(),
            (0..full.iter().product::<usize>()).map(|i| i as f64).collect(),
        ).unwrap();
        let r = kernels::reduce_to_shape(&g, &Shape::new(target.clone()).unwrap()).unwrap();
        prop_assert_eq!(r.dims(), target.as_slice());
        let total: f64 = g.data().iter().sum();
        prop_assert!((r.data().iter().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn conv_extent_formula(h in 1usize..40, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let got = conv_output_extent(h, k, s, p);
        if h + 2 * p >= k {
            prop_assert_eq!(got, Some((h + 2 * p - k) / s + 1));
        } else {
            prop_assert_eq!(got, None);
        }
    }
}

#[test]
fn zero_extent_is_rejected() {
    assert!(Shape::new(vec![2, 0]).is_err());
    assert!(Tensor::<f32>::zeros(vec![0]).is_err());
}

#[test]
fn reshape_shares_storage() {
    let t = Tensor::<f32>::ones(vec![2, 6]).unwrap();
    let r = t.reshape(vec![3, 4]).unwrap();
    assert!(r.shares_storage(&t));
    assert!(t.reshape(vec![5]).is_err());
}
