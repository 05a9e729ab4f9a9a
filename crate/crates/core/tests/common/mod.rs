#![allow(dead_code)]

pub mod cases;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsrep_core::autodiff::{Graph, Value};
use tsrep_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_complex(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new_complex(shape, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed, index-dependent weights so that a scalar probe of a tensor output
/// is the same function on every rebuild of the graph.
pub fn probe_weight(i: usize) -> f64 {
    (1.3 * i as f64 + 0.7).sin() + 0.5 * (0.37 * i as f64).cos()
}

/// Reduces any (real or complex) output to a scalar with [`probe_weight`].
pub fn probe(g: &mut Graph, out: Value) -> Value {
    let out = if g.value(out).complex {
        g.as_real(out).unwrap()
    } else {
        out
    };
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(probe_weight).collect()).unwrap();
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Worst relative error between backward gradients and central finite
/// differences over all `inputs`. `f` builds a scalar from the inputs.
pub fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Value]) -> Value) -> f64 {
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vals);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vals
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.data.len()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vals: Vec<Value> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vals);
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.data.len()];
        for j in 0..t.data.len() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}
