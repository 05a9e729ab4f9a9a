//! Synthetic generator and separability probe.

mod common;

use common::rng;
use rand::Rng;
use tsrep_core::synthetic::{generate, nearest_centroid_loo, pca_2d, separability_probe, shuffled_baseline, SynthSpec};
use tsrep_core::Error;

#[test]
fn noiseless_series_repeat_with_their_period() {
    let spec = SynthSpec {
        noise_std: 0.0,
        ..SynthSpec::default()
    };
    let series = generate(&spec, 0).unwrap();
    for s in &series {
        let p = spec.periods[s.period].value as usize;
        for t in 0..spec.length - p {
            let step = spec.trend_value(s.trend, t + p) - spec.trend_value(s.trend, t);
            let diff = s.values[t + p] - s.values[t];
            assert!((diff - step).abs() <= 1e-9, "{} at t={t}", s.name());
        }
    }
}

#[test]
fn generation_is_seeded() {
    let spec = SynthSpec::default();
    let a = generate(&spec, 11).unwrap();
    let b = generate(&spec, 11).unwrap();
    assert_eq!(a, b);
    let c = generate(&spec, 12).unwrap();
    assert_ne!(a[0].values, c[0].values);
    let labels: Vec<(usize, usize)> = a.iter().map(|s| (s.trend, s.period)).collect();
    assert_eq!(labels, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
}

#[test]
fn separated_classes_score_one() {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for class in 0..3 {
        for _ in 0..5 {
            points.push(vec![class as f64 * 10.0, -(class as f64)]);
            labels.push(class);
        }
    }
    assert_eq!(nearest_centroid_loo(&points, &labels).unwrap(), 1.0);
    let scores = separability_probe(&points, &labels, &labels).unwrap();
    assert_eq!((scores.trend_score, scores.period_score), (1.0, 1.0));
}

#[test]
fn shuffled_labels_sit_near_chance() {
    let mut r = rng(5);
    let points: Vec<Vec<f64>> = (0..300).map(|i| vec![(i % 3) as f64 * 4.0 + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    assert!(nearest_centroid_loo(&points, &labels).unwrap() > 0.99);
    let base = shuffled_baseline(&points, &labels, 100, &mut r).unwrap();
    assert!((base - 1.0 / 3.0).abs() < 0.05, "baseline {base}");
}

#[test]
fn probe_needs_two_classes() {
    let points = vec![vec![0.0], vec![1.0]];
    assert!(matches!(nearest_centroid_loo(&points, &[0, 0]), Err(Error::Probe(_))));
}

#[test]
fn pca_coordinates_are_centered() {
    let mut r = rng(9);
    let points: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| r.random_range(-3.0..3.0) + 7.0).collect()).collect();
    let pc = pca_2d(&points).unwrap();
    for k in 0..2 {
        let mean = pc.iter().map(|p| p[k]).sum::<f64>() / pc.len() as f64;
        assert!(mean.abs() < 1e-9);
    }
    let var = |k: usize| pc.iter().map(|p| p[k] * p[k]).sum::<f64>();
    assert!(var(0) >= var(1));
}
