//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use quadrature::double_exponential;

/// `∫_a^b f` by tanh-sinh quadrature.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_err: f64) -> f64 {
    double_exponential::integrate(f, a, b, abs_err).integral
}

/// `∫_0^∞ g` via the substitution `t = s / (1 − s)`.
pub fn integrate_half_line<F: Fn(f64) -> f64>(g: F, abs_err: f64) -> f64 {
    integrate(
        |s| {
            if s >= 1.0 {
                return 0.0;
            }
            let t = s / (1.0 - s);
            let v = g(t) / ((1.0 - s) * (1.0 - s));
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        abs_err,
    )
}

/// Mean and variance of the sample-and-hold estimate for one key of value
/// `v`: the key enters with `c = v − r` when `r ~ Exp(mean τ)` falls below
/// `v`, and contributes `v − r + τ`.
pub fn sum_estimate_moments(v: f64, tau: f64) -> (f64, f64) {
    let density = |r: f64| (-r / tau).exp() / tau;
    let m1 = integrate(|r| (v + tau - r) * density(r), 0.0, v, 1e-14);
    let m2 = integrate(|r| (v + tau - r).powi(2) * density(r), 0.0, v, 1e-14);
    (m1, m2 - m1 * m1)
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Critical value of the two-sample KS statistic at level `alpha`
/// (asymptotic form).
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
