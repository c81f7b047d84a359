use proptest::prelude::*;
use sofa::metrics::{gini, lorenz, top_share};

fn mean_abs_difference_gini(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let total: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (a - b).abs())).sum();
    total / (2.0 * n * n * mean)
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1000.0], 1..=100)
        .prop_filter("positive total", |x| x.iter().sum::<f64>() > 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gini_matches_pairwise_formula(x in vector()) {
        let g = gini(&x).unwrap();
        prop_assert!((g - mean_abs_difference_gini(&x)).abs() <= 1e-12);
        let n = x.len() as f64;
        prop_assert!(g >= -1e-15 && g <= (n - 1.0) / n + 1e-12);
    }

    #[test]
    fn gini_is_scale_invariant(x in vector(), c in 1e-3f64..1e6) {
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!((gini(&scaled).unwrap() - gini(&x).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn lorenz_is_monotone_and_convex(x in vector()) {
        let pts = lorenz(&x).unwrap();
        prop_assert_eq!(pts[0], (0.0, 0.0));
        let last = pts[pts.len() - 1];
        prop_assert!((last.0 - 1.0).abs() <= 1e-15 && (last.1 - 1.0).abs() <= 1e-12);
        for w in pts.windows(2) {
            prop_assert!(w[1].0 > w[0].0 && w[1].1 >= w[0].1 - 1e-15);
        }
        // Points are evenly spaced in population share.
        for w in pts.windows(3) {
            prop_assert!(w[2].1 - 2.0 * w[1].1 + w[0].1 >= -1e-12);
        }
    }

    #[test]
    fn top_shares_are_bounded_and_ordered(x in vector()) {
        prop_assert_eq!(top_share(&x, 100.0).unwrap(), 1.0);
        let mut prev = 0.0;
        for k in [1.0, 10.0, 20.0, 50.0, 100.0] {
            let s = top_share(&x, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&s) && s >= prev);
            prev = s;
        }
    }
}

#[test]
fn empty_and_zero_inputs_are_errors() {
    assert!(gini(&[]).is_err());
    assert!(gini(&[0.0, 0.0]).is_err());
    assert!(gini(&[1.0, -1.0]).is_err());
}
