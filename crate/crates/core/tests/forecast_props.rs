//! Ridge head against independent oracles, and evaluation invariants.

mod common;

use common::oracles::ridge_oracle as oracle;
use common::rng;
use proptest::prelude::*;
use rand::Rng;
use tsrep_core::backbone::{BackboneConfig, BackboneParams, Checkpoint};
use tsrep_core::data::{ChannelMode, SeriesDataset, SplitSpec};
use tsrep_core::forecast::{
    evaluate, fit_linear, fit_ridge, select_alpha, select_alpha_dense, EvalConfig, GramStats, RidgeModel,
    ALPHA_GRID,
};
use tsrep_core::Error;

fn random_problem(seed: u64, m: usize, d: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = (0..m * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let y = (0..m * t).map(|_| r.random_range(-2.0..2.0)).collect();
    (x, y)
}

fn objective(model: &RidgeModel, r: &[f64], y: &[f64], w: &[f64], b: &[f64]) -> f64 {
    let (d, t) = (model.dim, model.horizon);
    let probe = RidgeModel {
        w: w.to_vec(),
        b: b.to_vec(),
        ..model.clone()
    };
    let sse: f64 = r
        .chunks(d)
        .zip(y.chunks(t))
        .map(|(ri, yi)| probe.predict(ri).iter().zip(yi).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum();
    sse + model.alpha * w.iter().map(|v| v * v).sum::<f64>()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ridge_matches_normal_equations_on_50_problems() {
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let (m, d, t) = (r.random_range(8..60), r.random_range(1..8), r.random_range(1..5));
        let alpha = [0.0, 0.1, 1.0, 10.0][seed as usize % 4] + if m <= d { 1.0 } else { 0.0 };
        let (x, y) = random_problem(seed, m, d, t);
        let model = fit_ridge(&x, &y, d, t, alpha).unwrap();
        let (w, b) = oracle(&x, &y, d, t, alpha);
        assert!(max_diff(&model.w, &w) < 1e-8, "problem {seed}: W differs");
        assert!(max_diff(&model.b, &b) < 1e-8, "problem {seed}: b differs");
    }
}

#[test]
fn twenty_by_five_example() {
    let (x, y) = random_problem(77, 20, 5, 3);
    let model = fit_ridge(&x, &y, 5, 3, 0.5).unwrap();
    let (w, _) = oracle(&x, &y, 5, 3, 0.5);
    assert!(max_diff(&model.w, &w) < 1e-8);
}

#[test]
fn exact_fit_and_shrinkage_limits() {
    let (x, _) = random_problem(3, 40, 6, 1);
    let mut r = rng(4);
    let w_true: Vec<f64> = (0..6 * 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .chunks(6)
        .flat_map(|row| (0..2).map(|j| 0.7 + (0..6).map(|k| row[k] * w_true[k * 2 + j]).sum::<f64>()).collect::<Vec<_>>())
        .collect();
    let exact = fit_ridge(&x, &y, 6, 2, 0.0).unwrap();
    for (row, target) in x.chunks(6).zip(y.chunks(2)) {
        assert!(max_diff(&exact.predict(row), target) < 1e-8);
    }
    let shrunk = fit_ridge(&x, &y, 6, 2, 1e12).unwrap();
    assert!(shrunk.w.iter().all(|v| v.abs() < 1e-6));
    let linear = fit_linear(&x, &y, 6, 2).unwrap();
    assert!(max_diff(&linear.w, &exact.w) < 1e-10);
}

#[test]
fn alpha_zero_on_rank_deficient_design() {
    let (mut x, y) = random_problem(8, 30, 3, 2);
    // duplicate the first column
    x = x.chunks(3).flat_map(|r| vec![r[0], r[1], r[2], r[0]]).collect();
    assert!(matches!(fit_ridge(&x, &y, 4, 2, 0.0), Err(Error::SingularMatrix)));
    // minimum-norm solution splits the weight of the duplicated feature
    let base: Vec<f64> = x.chunks(4).flat_map(|r| r[..3].to_vec()).collect();
    let (wb, bb) = oracle(&base, &y, 3, 2, 0.0);
    let mut expect = vec![0.0; 8];
    for j in 0..2 {
        expect[j] = wb[j] / 2.0;
        expect[2 + j] = wb[2 + j];
        expect[4 + j] = wb[4 + j];
        expect[6 + j] = wb[j] / 2.0;
    }
    let model = fit_linear(&x, &y, 4, 2).unwrap();
    assert!(max_diff(&model.w, &expect) < 1e-8, "{:?} vs {expect:?}", model.w);
    assert!(max_diff(&model.b, &bb) < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solution_is_locally_optimal(seed in 0u64..10_000, alpha in 0.01f64..20.0) {
        let (x, y) = random_problem(seed, 25, 4, 2);
        let model = fit_ridge(&x, &y, 4, 2, alpha).unwrap();
        let best = objective(&model, &x, &y, &model.w, &model.b);
        for i in 0..model.w.len() {
            for step in [-1e-3, 1e-3] {
                let mut w = model.w.clone();
                w[i] += step;
                // refit the intercept for the moved weights
                let b: Vec<f64> = (0..2)
                    .map(|j| {
                        let m = 25.0;
                        let ym = y.chunks(2).map(|r| r[j]).sum::<f64>() / m;
                        ym - (0..4).map(|k| x.chunks(4).map(|r| r[k]).sum::<f64>() / m * w[k * 2 + j]).sum::<f64>()
                    })
                    .collect();
                prop_assert!(objective(&model, &x, &y, &w, &b) >= best - 1e-9);
            }
        }
        let mut r = rng(seed + 1);
        for _ in 0..50 {
            let w: Vec<f64> = model.w.iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
            let b: Vec<f64> = model.b.iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
            prop_assert!(objective(&model, &x, &y, &w, &b) >= best - 1e-9);
        }
    }

    #[test]
    fn streamed_moments_match_dense(seed in 0u64..1000, m in 5usize..3000) {
        let (x, y) = random_problem(seed, m, 3, 2);
        let dense = GramStats::from_dense(&x, &y, 3, 2).unwrap().solve(0.3).unwrap();
        let streamed = GramStats::collect(m, 3, 2, |i, r, t| {
            r.copy_from_slice(&x[i * 3..i * 3 + 3]);
            t.copy_from_slice(&y[i * 2..i * 2 + 2]);
        })
        .unwrap()
        .solve(0.3)
        .unwrap();
        prop_assert!(max_diff(&dense.w, &streamed.w) < 1e-9);
    }
}

#[test]
fn alpha_selection_rules() {
    let (x, y) = random_problem(5, 40, 3, 1);
    let stats = GramStats::from_dense(&x, &y, 3, 1).unwrap();
    assert_eq!(select_alpha(&stats, &[7.0], |_| 1.0).unwrap().0, 7.0);
    // constant validation error: ties go to the smallest alpha
    assert_eq!(select_alpha(&stats, &[5.0, 0.2, 1.0], |_| 1.0).unwrap().0, 0.2);
    assert!(select_alpha(&stats, &[], |_| 1.0).is_err());
    assert_eq!(ALPHA_GRID.len(), 13);

    // noiseless linear data prefers the least shrinkage
    let w = [0.5, -1.0, 2.0];
    let lin = |x: &[f64]| x.chunks(3).map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
    let (xt, _) = random_problem(6, 50, 3, 1);
    let (xv, _) = random_problem(7, 20, 3, 1);
    let alpha = select_alpha_dense(&xt, &lin(&xt), &xv, &lin(&xv), 3, 1, &ALPHA_GRID).unwrap();
    assert_eq!(alpha, 0.1);
}

fn small_dataset(order: &[usize]) -> SeriesDataset {
    let len = 240;
    let mut raw = Vec::with_capacity(len * 3);
    for t in 0..len {
        let tf = t as f64;
        let cols = [(tf / 7.0).sin() + 0.01 * tf, (tf / 3.0).cos() * 2.0, (tf / 11.0).sin() * (tf / 5.0).cos()];
        raw.extend(order.iter().map(|&c| cols[c]));
    }
    let names = order.iter().map(|c| format!("v{c}")).collect();
    let split = SplitSpec::ratios_60_20_20().resolve(len, None).unwrap();
    SeriesDataset::from_raw("toy", names, raw, split).unwrap()
}

fn small_checkpoint() -> Checkpoint {
    let cfg = BackboneConfig {
        d_model: 4,
        d_rep: 8,
        kernel_sizes: vec![1, 2, 4],
        input_len: 16,
        ..BackboneConfig::default()
    };
    let p = BackboneParams::init(&cfg, &mut rng(3)).unwrap();
    Checkpoint::new(cfg, 0, 0, p.clone(), p)
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        horizons: vec![4, 12],
        target_variable: Some("v1".into()),
        ..EvalConfig::default()
    }
}

#[test]
fn evaluation_is_deterministic_and_order_free() {
    let ck = small_checkpoint();
    let a = evaluate(&ck, &small_dataset(&[0, 1, 2]), &eval_cfg(), 0, "default", "fp").unwrap();
    let b = evaluate(&ck, &small_dataset(&[0, 1, 2]), &eval_cfg(), 0, "default", "fp").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    let c = evaluate(&ck, &small_dataset(&[2, 0, 1]), &eval_cfg(), 0, "default", "fp").unwrap();
    for (x, y) in a.iter().zip(&c) {
        assert_eq!((x.protocol, x.horizon, x.alpha_selected), (y.protocol, y.horizon, y.alpha_selected));
        assert!((x.mse - y.mse).abs() <= 1e-9 * x.mse.max(1.0));
        assert!((x.mae - y.mae).abs() <= 1e-9 * x.mae.max(1.0));
    }
    for r in &a {
        assert!(r.mae * r.mae <= r.mse + 1e-12);
    }
}

#[test]
fn channel_mismatch_is_reported() {
    let ck = small_checkpoint();
    let cfg = EvalConfig {
        channel_mode: ChannelMode::Mix,
        ..eval_cfg()
    };
    assert!(matches!(
        evaluate(&ck, &small_dataset(&[0, 1, 2]), &cfg, 0, "x", "fp"),
        Err(Error::CheckpointMismatch(_))
    ));
}
