use proptest::prelude::*;
use specret_core::spectra::{denormalize, normalize, softclamp_scalar, EmissivitySpectrum};

proptest! {
    #[test]
    fn softclamp_bounded_and_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, lo in -5.0f64..5.0, w in 0.01f64..10.0) {
        let hi = lo + w;
        let (fa, fb) = (softclamp_scalar(a, lo, hi), softclamp_scalar(b, lo, hi));
        // far tails sit within one ulp of the bound
        prop_assert!(fa >= lo && fa <= hi);
        if a < b { prop_assert!(fa <= fb); }
        let near = |x: f64| x > lo - w && x < hi + w;
        if a < b && near(a) && near(b) { prop_assert!(fa < fb); }
    }

    #[test]
    fn softclamp_near_identity_in_core(t in 0.1f64..0.9) {
        prop_assert!((softclamp_scalar(t, 0.0, 1.0) - t).abs() < 1e-3);
    }

    #[test]
    fn normalize_round_trip(v in prop::collection::vec(0.05f64..0.95, 3..64)) {
        let e = EmissivitySpectrum::new(v.clone()).unwrap();
        let ne = normalize(&e);
        prop_assume!(!ne.constant);
        let back = denormalize(&ne);
        for (a, b) in back.values().iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
