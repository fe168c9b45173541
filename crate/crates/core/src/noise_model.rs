//! Inverse-Gamma noise variances and the Student-t marginal they induce.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::diffmath::special::{digamma, ln_gamma, trigamma};
use crate::diffmath::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Shape/scale of an Inverse-Gamma distribution over a variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IGParams {
    pub alpha: f64,
    pub beta_scale: f64,
}

impl IGParams {
    pub fn new(alpha: f64, beta_scale: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta_scale > 0.0 && alpha.is_finite() && beta_scale.is_finite()) {
            return Err(Error::Domain(format!(
                "Inverse-Gamma needs positive finite shape and scale, got ({alpha}, {beta_scale})"
            )));
        }
        Ok(Self { alpha, beta_scale })
    }

    /// The confidence prior `IG(lambda/2, lambda/2)`.
    pub fn prior(lambda: f64) -> Result<Self> {
        Self::new(0.5 * lambda, 0.5 * lambda)
    }

    /// `E[v]`, finite only for `alpha > 1`.
    pub fn mean(&self) -> f64 {
        if self.alpha > 1.0 {
            self.beta_scale / (self.alpha - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn mode(&self) -> f64 {
        self.beta_scale / (self.alpha + 1.0)
    }
}

pub fn ig_log_pdf(v: f64, p: &IGParams) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::Domain(format!("Inverse-Gamma density needs v > 0, got {v}")));
    }
    Ok(p.alpha * p.beta_scale.ln() - ln_gamma(p.alpha) - (p.alpha + 1.0) * v.ln() - p.beta_scale / v)
}

/// `E[1/v] = alpha / beta`.
pub fn ig_mean_inverse(p: &IGParams) -> f64 {
    p.alpha / p.beta_scale
}

fn ig_kl_raw(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    (a1 - a2) * digamma(a1) + ln_gamma(a2) - ln_gamma(a1) + a2 * (b1.ln() - b2.ln()) + a1 * (b2 - b1) / b1
}

/// `KL(q || p)` between Inverse-Gamma distributions.
pub fn ig_kl(q: &IGParams, p: &IGParams) -> Result<f64> {
    IGParams::new(q.alpha, q.beta_scale)?;
    IGParams::new(p.alpha, p.beta_scale)?;
    Ok(ig_kl_raw(q.alpha, q.beta_scale, p.alpha, p.beta_scale))
}

/// Log density of the standard Student-t with `dof` degrees of freedom.
pub fn student_t_log_pdf(residual: f64, dof: f64) -> Result<f64> {
    if !(dof > 0.0) {
        return Err(Error::Domain(format!("Student-t needs dof > 0, got {dof}")));
    }
    let half = 0.5 * (dof + 1.0);
    Ok(ln_gamma(half) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln() - half * (residual * residual / dof).ln_1p())
}

/// Exact posterior of a variance with prior `IG(lambda/2, lambda/2)` after one
/// Gaussian observation `y` with mean `m`.
pub fn conjugate_ig_posterior(y: f64, m: f64, lambda: f64) -> Result<IGParams> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let d = y - m;
    IGParams::new(0.5 * lambda + 0.5, 0.5 * lambda + 0.5 * d * d)
}

struct IgKlOp {
    prior: IGParams,
}

impl CustomOp for IgKlOp {
    fn name(&self) -> &'static str {
        "ig_kl"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.values()[0];
        let (alpha, beta) = (inputs[0], inputs[1]);
        let (a2, b2) = (self.prior.alpha, self.prior.beta_scale);
        let mut da = Vec::with_capacity(alpha.len());
        let mut db = Vec::with_capacity(alpha.len());
        for (&a1, &b1) in alpha.values().iter().zip(beta.values()) {
            da.push(g * ((a1 - a2) * trigamma(a1) + b2 / b1 - 1.0));
            db.push(g * (a2 / b1 - a1 * b2 / (b1 * b1)));
        }
        vec![
            Some(Tensor::new(alpha.shape().to_vec(), da).unwrap()),
            Some(Tensor::new(beta.shape().to_vec(), db).unwrap()),
        ]
    }
}

/// Recorded `sum KL(IG(alpha, beta) || prior)` over all entries.
pub fn ig_kl_node(g: &mut Graph, alpha: Var, beta: Var, prior: IGParams) -> Var {
    let total: f64 = g
        .value(alpha)
        .values()
        .iter()
        .zip(g.value(beta).values())
        .map(|(&a, &b)| ig_kl_raw(a, b, prior.alpha, prior.beta_scale))
        .sum();
    g.custom(&[alpha, beta], Tensor::scalar(total), Box::new(IgKlOp { prior }))
}

/// Eigenvalues and squared first eigenvector components of a symmetric
/// tridiagonal matrix (implicit QL), i.e. Golub-Welsch nodes and weights.
fn golub_welsch(diag: &[f64], off: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(off);
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = z[i + 1];
                z[i + 1] = s * z[i] + c * f;
                z[i] = c * z[i] - s * f;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut pairs: Vec<(f64, f64)> = d.into_iter().zip(z.into_iter().map(|v| v * v)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

pub const QUADRATURE_POINTS: usize = 32;

/// Gauss-Laguerre nodes/weights for the weight `x^(a) e^(-x)`, weights
/// normalized to sum to one.
pub fn gauss_laguerre(n: usize, a: f64) -> (Vec<f64>, Vec<f64>) {
    let diag: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 + a + 1.0).collect();
    let off: Vec<f64> = (1..n).map(|i| (i as f64 * (i as f64 + a)).sqrt()).collect();
    golub_welsch(&diag, &off)
}

/// Gauss-Hermite nodes/weights for `e^(-x^2)`, weights normalized to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|i| (0.5 * i as f64).sqrt()).collect();
    golub_welsch(&diag, &off)
}

fn hermite_32() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(QUADRATURE_POINTS))
}

/// `E[v / (v + 1)]` for `v ~ IG(alpha, beta)` by 32-point quadrature.
///
/// With `x = beta / v ~ Gamma(alpha, 1)` the expectation is
/// `E[beta / (beta + x)]`, integrated with generalized Gauss-Laguerre nodes.
/// Large shapes switch to Gauss-Hermite on `ln v`, where the density is close
/// to Gaussian, with self-normalized weights.
pub fn expected_shrink_weight(p: &IGParams) -> f64 {
    let (alpha, beta) = (p.alpha, p.beta_scale);
    if alpha <= 64.0 {
        let (x, w) = gauss_laguerre(QUADRATURE_POINTS, alpha - 1.0);
        x.iter().zip(&w).map(|(xi, wi)| wi * beta / (beta + xi)).sum()
    } else {
        // log-density of w = ln v: -alpha w - beta e^{-w} + const; mode ln(beta/alpha)
        let center = (beta / alpha).ln();
        let sd = 1.0 / alpha.sqrt();
        let (x, w) = hermite_32();
        let log_g = |lw: f64| -alpha * (lw - center) - beta * ((-lw).exp() - (-center).exp());
        let mut num = 0.0;
        let mut den = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            let lw = center + std::f64::consts::SQRT_2 * sd * xi;
            let ratio = (log_g(lw) + xi * xi).exp() * wi;
            let f = 1.0 / (1.0 + (-lw).exp());
            num += ratio * f;
            den += ratio;
        }
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_params_rejected() {
        assert!(IGParams::new(0.0, 1.0).is_err());
        assert!(IGParams::new(1.0, -1.0).is_err());
        assert!(IGParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn log_pdf_plug_in() {
        let p = IGParams::new(1.0, 1.0).unwrap();
        assert!((ig_log_pdf(1.0, &p).unwrap() + 1.0).abs() < 1e-14);
        assert!(ig_log_pdf(0.0, &p).is_err());
    }

    #[test]
    fn mode_is_grid_argmax() {
        let p = IGParams::new(3.0, 2.0).unwrap();
        let best = (1..20_000)
            .map(|i| i as f64 * 1e-4)
            .max_by(|a, b| ig_log_pdf(*a, &p).unwrap().total_cmp(&ig_log_pdf(*b, &p).unwrap()))
            .unwrap();
        assert!((best - p.mode()).abs() < 2e-4, "{best} vs {}", p.mode());
    }

    #[test]
    fn mean_inverse_values() {
        assert_eq!(ig_mean_inverse(&IGParams::new(2.0, 2.0).unwrap()), 1.0);
        for lambda in [10.0, 1e3, 1e6] {
            assert!((ig_mean_inverse(&IGParams::prior(lambda).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_zero_iff_equal() {
        let p = IGParams::new(2.5, 0.7).unwrap();
        assert!(ig_kl(&p, &p).unwrap().abs() < 1e-12);
        let q = IGParams::new(2.6, 0.7).unwrap();
        assert!(ig_kl(&q, &p).unwrap() > 0.0);
        assert!(ig_kl(&IGParams { alpha: -1.0, beta_scale: 1.0 }, &p).is_err());
    }

    #[test]
    fn student_t_is_even_and_validated() {
        for y in [0.3, 1.0, 7.0] {
            assert_eq!(student_t_log_pdf(y, 3.0).unwrap(), student_t_log_pdf(-y, 3.0).unwrap());
        }
        assert!(student_t_log_pdf(1.0, 0.0).is_err());
    }

    #[test]
    fn student_t_gaussian_limit() {
        let normal = -0.5 * (2.0 * PI).ln() - 0.5;
        assert!((student_t_log_pdf(1.0, 1e6).unwrap() - normal).abs() < 1e-3);
    }

    #[test]
    fn conjugate_posterior_cases() {
        let p = conjugate_ig_posterior(3.0, 3.0, 4.0).unwrap();
        assert_eq!((p.alpha, p.beta_scale), (2.5, 2.0));
        let p = conjugate_ig_posterior(2.0, 0.0, 4.0).unwrap();
        assert_eq!((p.alpha, p.beta_scale), (2.5, 4.0));
        assert!((p.mean() - 4.0 / 1.5).abs() < 1e-12);
        let means: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|r| conjugate_ig_posterior(*r, 0.0, 4.0).unwrap().mean())
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]));
        assert!(conjugate_ig_posterior(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn laguerre_rule_integrates_moments() {
        // E[x^k] = Gamma(a+1+k)/Gamma(a+1) under x^a e^-x
        for a in [0.0, -0.5, 3.2, 40.0] {
            let (x, w) = gauss_laguerre(QUADRATURE_POINTS, a);
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let m1: f64 = x.iter().zip(&w).map(|(x, w)| x * w).sum();
            assert!((m1 - (a + 1.0)).abs() < 1e-9 * (a + 1.0).max(1.0), "a = {a}: {m1}");
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
            assert!((m2 - (a + 1.0) * (a + 2.0)).abs() < 1e-8 * (a + 2.0).powi(2));
        }
    }

    #[test]
    fn hermite_rule_moments() {
        let (x, w) = gauss_hermite(QUADRATURE_POINTS);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((m2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shrink_weight_limits() {
        // tiny variance -> 0, huge variance -> 1
        let tiny = IGParams::new(1e5, 1e-3).unwrap();
        assert!(expected_shrink_weight(&tiny) < 1e-7);
        let huge = IGParams::new(1e5, 1e12).unwrap();
        assert!(expected_shrink_weight(&huge) > 1.0 - 1e-6);
        let unit = IGParams::prior(1e6).unwrap();
        assert!((expected_shrink_weight(&unit) - 0.5).abs() < 1e-5);
    }
}
