//! Encoder contracts: shapes, causality, linearity and gradient flow.

mod common;

use common::{cases, random_tensor, rng};
use proptest::prelude::*;
use tsrep_core::backbone::{encode, encode_series, BackboneConfig, BackboneParams, Branch, Timesteps, TrendPool};

fn small(len: usize) -> BackboneConfig {
    BackboneConfig {
        d_model: 4,
        d_rep: 6,
        kernel_sizes: vec![1, 2, 4],
        input_len: len,
        ..BackboneConfig::default()
    }
}

fn params(cfg: &BackboneConfig, seed: u64) -> BackboneParams {
    BackboneParams::init(cfg, &mut rng(seed)).unwrap()
}

#[test]
fn appending_future_values_leaves_past_representations_unchanged() {
    let cfg = small(16);
    let p = params(&cfg, 3);
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[60]).data;
    let base = encode_series(&x, &p, &cfg, 1).unwrap();
    assert_eq!(base.len(), 60 - 16 + 1);
    for cut in [20usize, 33, 59] {
        let mut y = x.clone();
        for v in &mut y[cut + 1..] {
            *v += 5.0;
        }
        y.extend([1.0, -2.0, 3.0]);
        let changed = encode_series(&y, &p, &cfg, 1).unwrap();
        for ((t, a), (u, b)) in base.iter().zip(&changed) {
            assert_eq!(t, u);
            if *t <= cut {
                let diff = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-12, "r^{t} moved by {diff} after editing t > {cut}");
            }
        }
    }
}

#[test]
fn series_position_counts() {
    let cfg = small(8);
    let p = params(&cfg, 0);
    assert_eq!(encode_series(&[0.5; 8], &p, &cfg, 1).unwrap().len(), 1);
    assert_eq!(encode_series(&[0.5; 17], &p, &cfg, 1).unwrap().len(), 10);
    assert_eq!(encode_series(&[0.5; 17], &p, &cfg, 4).unwrap().len(), 3);
    assert!(encode_series(&[0.5; 7], &p, &cfg, 1).is_err());
}

#[test]
fn periodic_branch_is_linear_without_bias() {
    let cfg = small(12).ablate(Branch::Trend).unwrap();
    let mut p = params(&cfg, 9);
    p.proj_b.data.fill(0.0);
    let mut r = rng(10);
    for trial in 0..20 {
        let a = random_tensor(&mut r, &[2, 12, 1]).data;
        let b = random_tensor(&mut r, &[2, 12, 1]).data;
        let (al, be) = (0.3 + trial as f64 * 0.1, -1.7);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| al * x + be * y).collect();
        let ea = encode(&p, &cfg, &a, &a, 2).unwrap();
        let eb = encode(&p, &cfg, &b, &b, 2).unwrap();
        let em = encode(&p, &cfg, &mix, &mix, 2).unwrap();
        for i in 0..em.data.len() {
            let lin = al * ea.data[i] + be * eb.data[i];
            assert!((em.data[i] - lin).abs() <= 1e-9, "trial {trial}");
        }
    }
}

fn full_encode_fd(cfg: &BackboneConfig, steps: Timesteps, trials: u64) {
    for trial in 0..trials {
        let err = cases::full_encode(cfg, steps, trial);
        assert!(err < 1e-4, "trial {trial}: rel err {err:e}");
    }
}

#[test]
fn full_encode_gradients_match_finite_differences() {
    full_encode_fd(&small(8), Timesteps::Last, 20);
}

#[test]
fn full_encode_gradients_other_configurations() {
    let mut two_ch = small(8);
    two_ch.in_channels = 2;
    full_encode_fd(&two_ch, Timesteps::Last, 5);
    full_encode_fd(&small(8), Timesteps::All, 5);
    let time_pool = BackboneConfig {
        trend_pool: TrendPool::Time,
        ..small(8)
    };
    full_encode_fd(&time_pool, Timesteps::Last, 5);
    full_encode_fd(&small(8).ablate(Branch::Periodicity).unwrap(), Timesteps::Last, 5);
    full_encode_fd(&small(8).ablate(Branch::Trend).unwrap(), Timesteps::Last, 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_is_batch_by_d_rep(
        len in 4usize..24,
        batch in 1usize..4,
        channels in 1usize..3,
        half in 1usize..5,
        drop in 0usize..3,
    ) {
        let d_rep = 2 * half;
        let mut cfg = BackboneConfig {
            d_model: 3,
            d_rep,
            kernel_sizes: vec![1, 2, 4],
            input_len: len,
            in_channels: channels,
            ..BackboneConfig::default()
        };
        if drop == 1 { cfg = cfg.ablate(Branch::Trend).unwrap(); }
        if drop == 2 { cfg = cfg.ablate(Branch::Periodicity).unwrap(); }
        let p = params(&cfg, len as u64);
        let x = random_tensor(&mut rng(1), &[batch, len, channels]).data;
        let out = encode(&p, &cfg, &x, &x, batch).unwrap();
        prop_assert_eq!(out.shape, vec![batch, d_rep]);
    }

    #[test]
    fn permuting_the_batch_permutes_rows(seed in 0u64..1000) {
        let cfg = small(10);
        let p = params(&cfg, seed);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[3, 10, 1]).data;
        let b = random_tensor(&mut r, &[3, 10, 1]).data;
        let perm = [2usize, 0, 1];
        let pick = |x: &[f64]| perm.iter().flat_map(|&i| x[i * 10..(i + 1) * 10].to_vec()).collect::<Vec<_>>();
        let out = encode(&p, &cfg, &a, &b, 3).unwrap();
        let out_p = encode(&p, &cfg, &pick(&a), &pick(&b), 3).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&out_p.data[row * 6..(row + 1) * 6], &out.data[src * 6..(src + 1) * 6]);
        }
    }
}

#[test]
fn ablation_widths() {
    let full = BackboneConfig::default();
    let no_trend = full.ablate(Branch::Trend).unwrap();
    assert_eq!((no_trend.d_trend(), no_trend.d_periodic()), (0, 320));
    let p = BackboneParams::init(&BackboneConfig { input_len: 64, ..no_trend }, &mut rng(0)).unwrap();
    assert!(p.trend.is_empty());
    let no_per = full.ablate(Branch::Periodicity).unwrap();
    assert_eq!((no_per.d_trend(), no_per.d_periodic()), (320, 0));
    assert!(no_per.ablate(Branch::Trend).is_err());
    assert!(full.d_trend() > 0 && full.d_periodic() > 0);
}
