use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tactile_fscil::strategy::{calibrators, CalibratorArgs, IdentityEstimator, OracleEstimator};
use tactile_fscil::transform::{apply_transform, ContextBounds, ContextParams};
use tactile_fscil::ucpc::{
    classify_scaled, draw_pseudo_contexts, prior_stats, sample_uncertainty_with, shrink, ClassRecord, PriorStats,
    UncertaintyMap,
};
use tactile_fscil::{SpecShape, Spectrogram};

fn record(class: usize, center: Vec<f64>) -> ClassRecord {
    ClassRecord {
        class,
        session: 0,
        prototype: center.clone(),
        center,
        variance: 0.05,
        uncertainty: 0.0,
    }
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, d)
}

proptest! {
    #[test]
    fn shrinkage_is_a_convex_blend(
        mu in vec_strategy(6), mp in vec_strategy(6), vy in 1e-3f64..5.0, vp in 1e-3f64..5.0,
    ) {
        let s = shrink(&mu, &PriorStats { mean: mp.clone(), variance: vp }, vy).unwrap();
        prop_assert!(s.lambda > 0.0 && s.lambda < 1.0);
        prop_assert!(s.variance > 0.0 && s.variance < vp.min(vy));
        for ((c, a), b) in s.center.iter().zip(&mu).zip(&mp) {
            prop_assert!(*c >= a.min(*b) - 1e-12 && *c <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn shrinkage_matches_closed_forms(my in -3.0f64..3.0, mp in -3.0f64..3.0, vy in 1e-3f64..5.0, vp in 1e-3f64..5.0) {
        let s = shrink(&[my], &PriorStats { mean: vec![mp], variance: vp }, vy).unwrap();
        let mean = (vp * my + vy * mp) / (vp + vy);
        let var = vp * vy / (vp + vy);
        prop_assert!((s.center[0] - mean).abs() <= 1e-10);
        prop_assert!((s.variance - var).abs() <= 1e-10);
        prop_assert!((s.lambda - vy / (vp + vy)).abs() <= 1e-10);
    }

    #[test]
    fn lambda_rises_with_likelihood_variance(vp in 1e-2f64..3.0, a in 1e-3f64..3.0, b in 1e-3f64..3.0) {
        prop_assume!((a - b).abs() > 1e-6);
        let prior = PriorStats { mean: vec![0.0], variance: vp };
        let la = shrink(&[1.0], &prior, a).unwrap().lambda;
        let lb = shrink(&[1.0], &prior, b).unwrap().lambda;
        prop_assert_eq!(la < lb, a < b);
    }

    #[test]
    fn decision_ignores_query_scale(z in vec_strategy(5), scale in 1e-3f64..1e3, centers in prop::collection::vec(vec_strategy(5), 2..6)) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(centers.iter().all(|c| c.iter().any(|v| v.abs() > 1e-3)));
        let records: Vec<ClassRecord> = centers.into_iter().enumerate().map(|(i, c)| record(i, c)).collect();
        let zs: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let (a, pa) = classify_scaled::<ChaCha8Rng>(&z, &records, None, 4.0).unwrap();
        let (b, pb) = classify_scaled::<ChaCha8Rng>(&zs, &records, None, 4.0).unwrap();
        prop_assert_eq!(a, b);
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn probabilities_normalize_and_follow_record_order(
        z in vec_strategy(4), centers in prop::collection::vec(vec_strategy(4), 2..7), seed in any::<u64>(),
    ) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(centers.iter().all(|c| c.iter().any(|v| v.abs() > 1e-3)));
        let records: Vec<ClassRecord> = centers.into_iter().enumerate().map(|(i, c)| record(i, c)).collect();
        let (_, p) = classify_scaled::<ChaCha8Rng>(&z, &records, None, 3.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);

        let mut order: Vec<usize> = (0..records.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<ClassRecord> = order.iter().map(|&i| records[i].clone()).collect();
        let (_, q) = classify_scaled::<ChaCha8Rng>(&z, &permuted, None, 3.0).unwrap();
        for (k, &i) in order.iter().enumerate() {
            prop_assert!((q[k] - p[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn uncertainty_ignores_draw_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SpecShape::new(1, 8, 6);
        let base = Spectrogram::from_fn(shape, |_, f, t| ((f * 5 + t) as f64 * 0.3).sin());
        let obs = apply_transform(&base, &ContextParams::new(0.05, 1.05, 0.1, 0.0)).unwrap();
        let mut contexts = draw_pseudo_contexts(&ContextBounds::default(), 12, &mut rng);
        let a = sample_uncertainty_with(&IdentityEstimator, &base, &obs, &contexts).unwrap();
        contexts.reverse();
        let b = sample_uncertainty_with(&IdentityEstimator, &base, &obs, &contexts).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn variance_map_is_increasing(alpha in 1e-3f64..10.0, beta in 1e-3f64..1.0, u in 0.0f64..5.0, du in 1e-6f64..5.0) {
        let m = UncertaintyMap { alpha, beta };
        prop_assert_eq!(m.variance(0.0), beta);
        prop_assert!(m.variance(u + du) > m.variance(u));
    }
}

#[test]
fn worked_shrinkage_example() {
    let s = shrink(&[1.0], &PriorStats { mean: vec![0.0], variance: 1.0 }, 3.0).unwrap();
    assert!((s.lambda - 0.75).abs() < 1e-12);
    assert!((s.center[0] - 0.25).abs() < 1e-12);
    assert!((s.variance - 0.75).abs() < 1e-12);
}

#[test]
fn prior_pools_earlier_prototypes() {
    let old = vec![record(0, vec![0.0, 0.0]), record(1, vec![2.0, 2.0])];
    let p = prior_stats(&old).unwrap();
    assert_eq!(p.mean, vec![1.0, 1.0]);
    assert!((p.variance - 1.0).abs() < 1e-12);
    assert!(prior_stats(&old[..1]).is_err());
}

#[test]
fn prior_reads_raw_prototypes_not_centers() {
    let mut a = record(0, vec![0.0, 0.0]);
    let mut b = record(1, vec![2.0, 2.0]);
    a.center = vec![9.0, 9.0];
    b.center = vec![-9.0, 4.0];
    assert_eq!(prior_stats(&[a, b]).unwrap().mean, vec![1.0, 1.0]);
}

#[test]
fn exact_ties_go_to_the_lowest_class() {
    let records = vec![record(7, vec![1.0, 0.0]), record(3, vec![1.0, 0.0]), record(5, vec![0.0, 1.0])];
    let (c, _) = classify_scaled::<ChaCha8Rng>(&[1.0, 0.0], &records, None, 1.0).unwrap();
    assert_eq!(c, 3);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let prior = PriorStats { mean: vec![0.0], variance: 1.0 };
    assert!(shrink(&[1.0], &prior, 0.0).is_err());
    assert!(shrink(&[1.0, 2.0], &prior, 1.0).is_err());
    let records = vec![record(0, vec![1.0, 0.0])];
    assert!(classify_scaled::<ChaCha8Rng>(&[0.0, 0.0], &records, None, 1.0).is_err());
    assert!(classify_scaled::<ChaCha8Rng>(&[f64::NAN, 0.0], &records, None, 1.0).is_err());
    assert!(classify_scaled::<ChaCha8Rng>(&[1.0, 0.0], &[], None, 1.0).is_err());
}

#[test]
fn plain_calibrator_never_shrinks() {
    let map = UncertaintyMap::default();
    let plain = calibrators().build("plain", &CalibratorArgs { map }).unwrap();
    let prior = PriorStats { mean: vec![0.0, 0.0], variance: 0.3 };
    let cal = plain.calibrate(&[1.0, -1.0], 0.9, Some(&prior)).unwrap();
    assert_eq!(cal.lambda, 0.0);
    assert_eq!(cal.variance, map.beta);
    assert_eq!(cal.center, vec![1.0, -1.0]);
    assert!(!plain.trains_variance() && !plain.needs_uncertainty());

    let ucpc = calibrators().build("ucpc", &CalibratorArgs { map }).unwrap();
    let first = ucpc.calibrate(&[1.0, -1.0], 0.9, None).unwrap();
    assert_eq!((first.lambda, first.variance), (0.0, map.beta));
    assert!(ucpc.calibrate(&[1.0, -1.0], 0.9, Some(&prior)).unwrap().lambda > 0.0);
    assert!(calibrators().build("nope", &CalibratorArgs { map }).is_err());
}

#[test]
fn oracle_uncertainty_vanishes_for_amplitude_contexts() {
    let shape = SpecShape::new(1, 10, 8);
    let base = Spectrogram::from_fn(shape, |_, f, t| ((f * 3 + t * 2) as f64 * 0.4).cos());
    let bounds = ContextBounds { delta_max: 0.0, tau_min: 1.0, tau_max: 1.0, ..ContextBounds::default() };
    let contexts = draw_pseudo_contexts(&bounds, 10, &mut ChaCha8Rng::seed_from_u64(3));
    let mut oracle = OracleEstimator::new();
    oracle.insert(&base, ContextParams::new(0.0, 1.0, 0.0, 0.0));
    for c in &contexts {
        oracle.insert(&apply_transform(&base, c).unwrap(), *c);
    }
    let u = sample_uncertainty_with(&oracle, &base, &base, &contexts).unwrap();
    assert!(u < 1e-12, "u = {u}");
}
