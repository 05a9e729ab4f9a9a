//! Slow reference implementations used as test oracles.

/// Naive DFT, keep the k largest bins, naive inverse.
pub fn naive_periodic(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len();
    let bins = n / 2 + 1;
    let tau = std::f64::consts::TAU;
    let spec: Vec<(f64, f64)> = (0..bins)
        .map(|f| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                let a = tau * (f * t) as f64 / n as f64;
                (re + v * a.cos(), im - v * a.sin())
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..bins).collect();
    order.sort_by(|&a, &b| {
        let amp = |f: usize| spec[f].0.hypot(spec[f].1);
        amp(b).total_cmp(&amp(a))
    });
    let mut out = vec![0.0; n];
    for &f in &order[..k] {
        let (re, im) = spec[f];
        // bins other than DC and Nyquist stand for a conjugate pair
        let (w, im) = if f == 0 || 2 * f == n { (1.0, 0.0) } else { (2.0, im) };
        for (t, o) in out.iter_mut().enumerate() {
            let a = tau * (f * t) as f64 / n as f64;
            *o += w * (re * a.cos() - im * a.sin()) / n as f64;
        }
    }
    out
}

/// Inverse of a dense square matrix by Gauss-Jordan with partial pivoting.
pub fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs())).unwrap();
        for j in 0..n {
            m.swap(col * n + j, piv * n + j);
            inv.swap(col * n + j, piv * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[row * n + col];
                for j in 0..n {
                    m[row * n + j] -= f * m[col * n + j];
                    inv[row * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

/// `(W, b)` from the centered normal equations.
pub fn ridge_oracle(r: &[f64], y: &[f64], d: usize, t: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let m = r.len() / d;
    let mean = |x: &[f64], w: usize| (0..w).map(|j| (0..m).map(|i| x[i * w + j]).sum::<f64>() / m as f64).collect::<Vec<_>>();
    let (rm, ym) = (mean(r, d), mean(y, t));
    let mut g = vec![0.0; d * d];
    let mut h = vec![0.0; d * t];
    for i in 0..m {
        for a in 0..d {
            let ra = r[i * d + a] - rm[a];
            for b in 0..d {
                g[a * d + b] += ra * (r[i * d + b] - rm[b]);
            }
            for b in 0..t {
                h[a * t + b] += ra * (y[i * t + b] - ym[b]);
            }
        }
    }
    for a in 0..d {
        g[a * d + a] += alpha;
    }
    let gi = invert(&g, d);
    let mut w = vec![0.0; d * t];
    for a in 0..d {
        for b in 0..t {
            w[a * t + b] = (0..d).map(|k| gi[a * d + k] * h[k * t + b]).sum();
        }
    }
    let b = (0..t).map(|j| ym[j] - (0..d).map(|k| rm[k] * w[k * t + j]).sum::<f64>()).collect();
    (w, b)
}

