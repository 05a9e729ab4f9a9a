//! Thin wrappers around `rustfft` for real-signal transforms.
//!
//! Conventions follow numpy: `rfft` is unnormalized with `F = n/2 + 1`
//! bins, `irfft` divides by `n` and ignores the imaginary parts of the DC and
//! (even-length) Nyquist bins.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Number of real-spectrum bins for a length-`n` signal.
pub fn rfft_bins(n: usize) -> usize {
    n / 2 + 1
}

/// In-place forward complex FFT over consecutive length-`n` chunks of `buf`.
pub fn fft_chunks(buf: &mut [Complex64], n: usize) {
    if buf.is_empty() {
        return;
    }
    forward_plan(n).process(buf);
}

/// In-place unnormalized inverse complex FFT over consecutive chunks.
pub fn ifft_chunks(buf: &mut [Complex64], n: usize) {
    if buf.is_empty() {
        return;
    }
    inverse_plan(n).process(buf);
}

pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_chunks(&mut buf, n);
    buf.truncate(rfft_bins(n));
    buf
}

/// Inverse of [`rfft`] for a length-`n` output.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    hermitian_fill(spec, &mut buf);
    ifft_chunks(&mut buf, n);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Expands `F` real-spectrum bins into the full conjugate-symmetric spectrum
/// of length `out.len()`.
pub fn hermitian_fill(spec: &[Complex64], out: &mut [Complex64]) {
    let n = out.len();
    let bins = rfft_bins(n);
    debug_assert_eq!(spec.len(), bins);
    out[0] = Complex64::new(spec[0].re, 0.0);
    for f in 1..bins {
        let z = spec[f];
        if n % 2 == 0 && f == n / 2 {
            out[f] = Complex64::new(z.re, 0.0);
        } else {
            out[f] = z;
            out[n - f] = z.conj();
        }
    }
}
