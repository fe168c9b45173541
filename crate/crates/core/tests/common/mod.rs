//! Independent reference computations shared by integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use statrs::function::gamma::ln_gamma;

/// `∫_0^∞ f(v) dv` by double-exponential quadrature after `v = t / (1 - t)`.
pub fn integrate_half_line(f: impl Fn(f64) -> f64) -> f64 {
    let g = |t: f64| {
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        let v = t / (1.0 - t);
        f(v) / ((1.0 - t) * (1.0 - t))
    };
    quadrature::double_exponential::integrate(g, 0.0, 1.0, 1e-13).integral
}

/// Inverse-Gamma log density, written out independently.
pub fn ig_ln_pdf(v: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * v.ln() - beta / v
}

pub fn normal_ln_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean) * (y - mean) / var)
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Draws of `IG(alpha, beta)` as `beta / Gamma(alpha, 1)`.
pub fn ig_samples(alpha: f64, beta: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Gamma::new(alpha, 1.0).unwrap();
    (0..n).map(|_| beta / g.sample(&mut rng)).collect()
}

/// Monte-Carlo `KL(IG(a1, b1) || IG(a2, b2))`: mean and standard error.
pub fn ig_kl_mc(q: (f64, f64), p: (f64, f64), n: usize, seed: u64) -> (f64, f64) {
    let terms: Vec<f64> = ig_samples(q.0, q.1, n, seed)
        .into_iter()
        .map(|v| ig_ln_pdf(v, q.0, q.1) - ig_ln_pdf(v, p.0, p.1))
        .collect();
    mean_se(&terms)
}

/// Monte-Carlo KL between diagonal Gaussians: mean and standard error.
pub fn gaussian_kl_mc(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let terms: Vec<f64> = (0..n)
        .map(|_| {
            (0..mu_q.len())
                .map(|i| {
                    let x = mu_q[i] + var_q[i].sqrt() * std_normal.sample(&mut rng);
                    normal_ln_pdf(x, mu_q[i], var_q[i]) - normal_ln_pdf(x, mu_p[i], var_p[i])
                })
                .sum()
        })
        .collect();
    mean_se(&terms)
}

/// `∫ N(y; 0, v) IG(v; λ/2, λ/2) dv`.
pub fn student_t_by_marginalization(y: f64, lambda: f64) -> f64 {
    let a = lambda / 2.0;
    integrate_half_line(|v| (normal_ln_pdf(y, 0.0, v) + ig_ln_pdf(v, a, a)).exp())
}

/// `E[1/v]` under `IG(alpha, beta)` by quadrature.
pub fn ig_mean_inverse_by_quadrature(alpha: f64, beta: f64) -> f64 {
    integrate_half_line(|v| (ig_ln_pdf(v, alpha, beta) - v.ln()).exp())
}
