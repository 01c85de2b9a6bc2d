//! Finite-difference verification helpers.
//!
//! Used by the test suites to compare analytic gradients against central
//! differences at 64-bit precision. The scalar function under test is
//! re-evaluated from scratch for every probe, so it must be deterministic.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Central-difference derivative of `f` w.r.t. coordinate `idx` of input `arg`.
pub fn central_diff<F>(f: &F, inputs: &[ArrayD<f64>], arg: usize, idx: usize, h: f64) -> f64
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut plus = inputs.to_vec();
    plus[arg].as_slice_mut().unwrap()[idx] += h;
    let mut minus = inputs.to_vec();
    minus[arg].as_slice_mut().unwrap()[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a small absolute floor so that near-zero pairs
/// compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences on a sample of
/// coordinates. `grads[i]` must match `inputs[i]` in shape. Returns the
/// worst relative error observed.
pub fn check_grads<F>(
    f: &F,
    inputs: &[ArrayD<f64>],
    grads: &[ArrayD<f64>],
    probes_per_input: usize,
    h: f64,
    rng: &mut ChaCha20Rng,
) -> f64
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    assert_eq!(inputs.len(), grads.len());
    let mut worst = 0.0f64;
    for (arg, grad) in grads.iter().enumerate() {
        let n = grad.len();
        assert_eq!(n, inputs[arg].len(), "gradient/input shape mismatch for arg {arg}");
        let probes = probes_per_input.min(n);
        for _ in 0..probes {
            let idx = rng.random_range(0..n);
            let analytic = grad.as_slice().unwrap()[idx];
            let numeric = central_diff(f, inputs, arg, idx, h);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
