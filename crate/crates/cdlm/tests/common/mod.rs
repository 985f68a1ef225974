//! Shared test oracles, implemented independently of the library's autodiff:
//! a central finite-difference gradient and a relative-error metric.

/// Central-difference gradient of `f` at `x`: (f(x+he_i) − f(x−he_i)) / 2h.
pub fn fd_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// max_i |a_i − b_i| / max(1, |a_i|, |b_i|).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0f64, f64::max)
}

/// Deterministic quasi-random values in (lo, hi) without an RNG dependency.
pub fn fill(n: usize, lo: f64, hi: f64, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut v = (i as u64).wrapping_add(salt).wrapping_mul(0x9E3779B97F4A7C15);
            v ^= v >> 29;
            v = v.wrapping_mul(0xBF58476D1CE4E5B9);
            v ^= v >> 32;
            let u = (v >> 11) as f64 / (1u64 << 53) as f64;
            lo + (hi - lo) * u
        })
        .collect()
}
