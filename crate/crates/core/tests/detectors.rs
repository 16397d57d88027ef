use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use umid_core::detectors::{fit, DetectorKind, DetectorParams, Ensemble, FeaturePoint};
use umid_core::UmidError;

fn blob(n: usize, seed: u64) -> Vec<FeaturePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| FeaturePoint::new(0.6 + 0.05 * g.sample(&mut rng), 0.3 + 0.05 * g.sample(&mut rng)))
        .collect()
}

#[test]
fn far_outlier_flagged_centroid_accepted() {
    let base = blob(200, 1);
    let params = DetectorParams::default();
    for kind in DetectorKind::ALL {
        let m = fit(kind, &base, &params).unwrap();
        assert!(m.vote(&FeaturePoint::new(0.6 + 0.5, 0.3 - 0.5)).unwrap(), "{kind} accepts the outlier");
        assert!(!m.vote(&FeaturePoint::new(0.6, 0.3)).unwrap(), "{kind} flags the centroid");
    }
}

#[test]
fn baseline_flag_rate_tracks_contamination() {
    let base = blob(400, 2);
    for contamination in [0.05, 0.1] {
        let params = DetectorParams { contamination, ..DetectorParams::default() };
        for kind in DetectorKind::ALL {
            let m = fit(kind, &base, &params).unwrap();
            let rate = base.iter().filter(|p| m.vote(p).unwrap()).count() as f64 / base.len() as f64;
            assert!((rate - contamination).abs() <= 0.01, "{kind}: {rate} at {contamination}");
        }
    }
}

#[test]
fn fitting_is_deterministic_and_serializable() {
    let base = blob(100, 3);
    let params = DetectorParams { seed: 11, ..DetectorParams::default() };
    let a = Ensemble::fit(&DetectorKind::ALL, &base, &params).unwrap();
    let b = Ensemble::fit(&DetectorKind::ALL, &base, &params).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ensemble.json");
    a.save(&path).unwrap();
    let c = Ensemble::load(&path).unwrap();
    let q = FeaturePoint::new(0.7, 0.2);
    assert_eq!(a.votes(&q).unwrap(), c.votes(&q).unwrap());
    for (x, y) in a.detectors.iter().zip(&c.detectors) {
        assert_eq!(x.score(&q).unwrap().to_bits(), y.score(&q).unwrap().to_bits());
    }
}

#[test]
fn bad_baselines_fail_to_fit() {
    let params = DetectorParams::default();
    let same = vec![FeaturePoint::new(0.5, 0.5); 30];
    let mixed = vec![FeaturePoint::new(0.5, 0.5), FeaturePoint::new(0.4, 0.5).with_coherence(0.1)];
    let nan = vec![FeaturePoint::new(0.5, f64::NAN), FeaturePoint::new(0.4, 0.5)];
    for base in [vec![], vec![FeaturePoint::new(0.1, 0.2)], same, mixed, nan] {
        for kind in DetectorKind::ALL {
            assert!(matches!(fit(kind, &base, &params), Err(UmidError::Fit(_))));
        }
    }
}

#[test]
fn small_baseline_warns_and_dims_are_checked() {
    let base = blob(10, 4);
    let m = fit(DetectorKind::IsolationForest, &base, &DetectorParams::default()).unwrap();
    assert_eq!(m.warnings.len(), 1);
    let q = FeaturePoint::new(0.5, 0.5).with_coherence(0.2);
    assert!(matches!(m.score(&q), Err(UmidError::Shape { .. })));
}

#[test]
fn three_feature_points_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Normal::new(0.0, 0.05).unwrap();
    let base: Vec<FeaturePoint> = blob(150, 5).into_iter().map(|p| p.with_coherence(0.2 + g.sample(&mut rng))).collect();
    for kind in DetectorKind::ALL {
        let m = fit(kind, &base, &DetectorParams::default()).unwrap();
        assert!(m.vote(&FeaturePoint::new(1.1, -0.2).with_coherence(0.9)).unwrap(), "{kind}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scores_are_invariant_to_affine_rescaling(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
        let base = blob(60, seed);
        let moved: Vec<FeaturePoint> = base
            .iter()
            .map(|p| FeaturePoint::new(p.similarity * scale + shift, p.variability * scale + shift))
            .collect();
        let params = DetectorParams { seed, ..DetectorParams::default() };
        for kind in [DetectorKind::LocalOutlierFactor, DetectorKind::IsolationForest, DetectorKind::OneClassSvm] {
            let a = fit(kind, &base, &params).unwrap();
            let b = fit(kind, &moved, &params).unwrap();
            prop_assert!((a.threshold - b.threshold).abs() < 1e-5 * (1.0 + a.threshold.abs()));
            for (p, q) in base.iter().zip(&moved) {
                let (sa, sb) = (a.score(p).unwrap(), b.score(q).unwrap());
                prop_assert!((sa - sb).abs() < 1e-5 * (1.0 + sa.abs()), "{}: {} vs {}", kind, sa, sb);
            }
        }
    }
}
