//! Finite-difference cases for each differentiable op, shared by the
//! gradient suite and the acceptance run.

use rand::Rng;
use tsrep_core::autodiff::{Graph, Value};
use tsrep_core::backbone::{encode_graph, BackboneConfig, BackboneParams, ParamNodes, Timesteps};
use tsrep_core::tensor::Tensor;

use super::{fd_check, probe, random_complex, random_tensor, rng};

pub type Loss = Box<dyn Fn(&mut Graph, &[Value]) -> Value>;
pub type Case = fn(u64) -> (Vec<Tensor>, Loss);

pub fn linear(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(100 + s);
    let (b, l, din, dout) = (2, r.random_range(1..4), 3, r.random_range(1..4));
    (
        vec![
            random_tensor(&mut r, &[b, l, din]),
            random_tensor(&mut r, &[din, dout]),
            random_tensor(&mut r, &[dout]),
        ],
        Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            probe(g, y)
        }),
    )
}

pub fn matmul(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(200 + s);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    (
        vec![random_tensor(&mut r, &[m, k]), random_tensor(&mut r, &[k, n])],
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            probe(g, y)
        }),
    )
}

pub fn conv(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(300 + s);
    let (b, l, d, k, dout) = (2, r.random_range(2..7), 2, r.random_range(1..4), 2);
    let n_out = r.random_range(1..=l);
    (
        vec![random_tensor(&mut r, &[b, l, d]), random_tensor(&mut r, &[k, d, dout])],
        Box::new(move |g, v| {
            let y = g.conv1d_causal_tail(v[0], v[1], n_out).unwrap();
            probe(g, y)
        }),
    )
}

pub fn rfft(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(400 + s);
    let l = r.random_range(2..9);
    (
        vec![random_tensor(&mut r, &[2, l, 2])],
        Box::new(|g, v| {
            let z = g.rfft(v[0]).unwrap();
            probe(g, z)
        }),
    )
}

pub fn rfft_modulus_sum(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(450 + s);
    let l = r.random_range(3..10);
    (
        vec![random_tensor(&mut r, &[1, l, 2])],
        Box::new(|g, v| {
            let z = g.rfft(v[0]).unwrap();
            let m = g.modulus(z).unwrap();
            g.sum_all(m).unwrap()
        }),
    )
}

pub fn irfft(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(500 + s);
    let n = r.random_range(2..10);
    (
        vec![random_complex(&mut r, &[2, n / 2 + 1, 2])],
        Box::new(move |g, v| {
            let x = g.irfft(v[0], n).unwrap();
            probe(g, x)
        }),
    )
}

pub fn complex_linear(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(600 + s);
    let (b, f, din, dout) = (2, r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    (
        vec![random_complex(&mut r, &[b, f, din]), random_complex(&mut r, &[f, din, dout])],
        Box::new(|g, v| {
            let y = g.complex_linear(v[0], v[1]).unwrap();
            probe(g, y)
        }),
    )
}

pub fn reduction(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(700 + s);
    let shape = [2, r.random_range(1..5), 3];
    let axis = r.random_range(0..3);
    (
        vec![random_tensor(&mut r, &shape)],
        Box::new(move |g, v| {
            let m = g.mean_over(v[0], axis).unwrap();
            let s = g.sum_over(v[0], axis).unwrap();
            let t = g.take_timestep(v[0], 0).unwrap();
            let a = probe(g, m);
            let b = probe(g, s);
            let c = probe(g, t);
            let ab = g.add(a, b).unwrap();
            g.add(ab, c).unwrap()
        }),
    )
}

pub fn concat_and_reshape(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(800 + s);
    let (a, b) = (r.random_range(1..4), r.random_range(1..4));
    (
        vec![random_tensor(&mut r, &[2, a]), random_tensor(&mut r, &[2, b])],
        Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let c = g.reshape(c, &[2 * (a + b)]).unwrap();
            probe(g, c)
        }),
    )
}

pub fn normalize_and_logsumexp(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(900 + s);
    let (n, d) = (r.random_range(1..4), r.random_range(2..6));
    (
        vec![random_tensor(&mut r, &[n, d])],
        Box::new(|g, v| {
            let u = g.l2_normalize(v[0], 1).unwrap();
            let u = g.scale(u, 3.0);
            let l = g.logsumexp(u, 1).unwrap();
            probe(g, l)
        }),
    )
}

pub fn elementwise(s: u64) -> (Vec<Tensor>, Loss) {
    let mut r = rng(1000 + s);
    let shape = [r.random_range(1..4), 3];
    (
        vec![random_tensor(&mut r, &shape), random_tensor(&mut r, &shape)],
        Box::new(|g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(v[0], v[1]).unwrap();
            let c = g.mul(a, b).unwrap();
            let d = g.scale(c, -0.7);
            let e = g.mul(d, v[0]).unwrap();
            probe(g, e)
        }),
    )
}

/// Every op case with a display name.
pub const ALL: &[(&str, Case)] = &[
    ("linear", linear),
    ("matmul", matmul),
    ("conv1d_causal", conv),
    ("rfft", rfft),
    ("rfft->modulus->sum", rfft_modulus_sum),
    ("irfft", irfft),
    ("complex_linear", complex_linear),
    ("mean/sum/take", reduction),
    ("concat/reshape", concat_and_reshape),
    ("l2_normalize/logsumexp", normalize_and_logsumexp),
    ("add/sub/mul/scale", elementwise),
];

/// Worst relative error of a scalar loss through the whole encoder, with
/// respect to every parameter tensor and both view tensors.
pub fn full_encode(cfg: &BackboneConfig, steps: Timesteps, trial: u64) -> f64 {
    let mut r = rng(100 + trial);
    let p = BackboneParams::init(cfg, &mut rng(200 + trial)).unwrap();
    let mut inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let n_params = inputs.len();
    let shape = [2, cfg.input_len, cfg.in_channels];
    inputs.push(random_tensor(&mut r, &shape));
    inputs.push(random_tensor(&mut r, &shape));
    let n_trend = p.trend.len();
    let has_periodic = p.periodic.is_some();
    let cfg = cfg.clone();
    fd_check(&inputs, move |g, v| {
        let nodes = ParamNodes {
            proj_w: v[0],
            proj_b: v[1],
            trend: v[2..2 + n_trend].to_vec(),
            periodic: has_periodic.then(|| v[n_params - 1]),
        };
        let rep = encode_graph(g, &cfg, &nodes, v[n_params], v[n_params + 1], steps).unwrap();
        probe(g, rep)
    })
}
