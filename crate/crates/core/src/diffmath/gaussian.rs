//! Diagonal Gaussians: closed-form KL and reparameterized sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{CustomOp, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_same_len(parts: &[&Tensor]) -> Result<()> {
    let n = parts[0].len();
    if parts.iter().any(|t| t.len() != n) {
        return Err(Error::Shape("gaussian parameter lengths differ".into()));
    }
    Ok(())
}

/// `KL(N(mu_q, var_q) || N(mu_p, var_p))` summed over all coordinates.
pub fn gaussian_kl(mu_q: &Tensor, var_q: &Tensor, mu_p: &Tensor, var_p: &Tensor) -> Result<f64> {
    check_same_len(&[mu_q, var_q, mu_p, var_p])?;
    if var_q.values().iter().chain(var_p.values()).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("gaussian_kl needs strictly positive variances".into()));
    }
    Ok(kl_terms(mu_q.values(), var_q.values(), mu_p.values(), var_p.values()))
}

fn kl_terms(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mq.len() {
        let d = mp[i] - mq[i];
        total += 0.5 * (vq[i] / vp[i] + d * d / vp[i] - 1.0 + vp[i].ln() - vq[i].ln());
    }
    total
}

struct GaussianKlOp;

impl CustomOp for GaussianKlOp {
    fn name(&self) -> &'static str {
        "gaussian_kl"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.values()[0];
        let (mq, vq, mp, vp) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let n = mq.len();
        let mut d_mq = vec![0.0; n];
        let mut d_vq = vec![0.0; n];
        let mut d_mp = vec![0.0; n];
        let mut d_vp = vec![0.0; n];
        for i in 0..n {
            let (a, va, b, vb) = (mq.values()[i], vq.values()[i], mp.values()[i], vp.values()[i]);
            let diff = a - b;
            d_mq[i] = g * diff / vb;
            d_mp[i] = -g * diff / vb;
            d_vq[i] = g * 0.5 * (1.0 / vb - 1.0 / va);
            d_vp[i] = g * 0.5 * (1.0 / vb - (va + diff * diff) / (vb * vb));
        }
        let shape = |t: &Tensor, v: Vec<f64>| Some(Tensor::new(t.shape().to_vec(), v).unwrap());
        vec![shape(mq, d_mq), shape(vq, d_vq), shape(mp, d_mp), shape(vp, d_vp)]
    }
}

/// Recorded KL between diagonal Gaussians, summed to a scalar node.
/// Variances must already be positive (e.g. softplus outputs).
pub fn gaussian_kl_node(g: &mut Graph, mu_q: Var, var_q: Var, mu_p: Var, var_p: Var) -> Var {
    let v = kl_terms(
        g.value(mu_q).values(),
        g.value(var_q).values(),
        g.value(mu_p).values(),
        g.value(var_p).values(),
    );
    g.custom(&[mu_q, var_q, mu_p, var_p], Tensor::scalar(v), Box::new(GaussianKlOp))
}

/// Standard normal noise with the given shape, deterministic in `seed`.
pub fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal_from(shape, &mut rng)
}

pub fn standard_normal_from(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape product")
}

/// `mu + sqrt(var) * eps` with `eps ~ N(0, I)` drawn from `seed`.
pub fn reparam_sample(mu: &Tensor, var: &Tensor, seed: u64) -> Result<Tensor> {
    check_same_len(&[mu, var])?;
    if var.values().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("reparam_sample needs non-negative variance".into()));
    }
    let eps = standard_normal(mu.shape(), seed);
    let values = mu
        .values()
        .iter()
        .zip(var.values())
        .zip(eps.values())
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), values)
}

/// Recorded reparameterized draw; gradients reach both `mu` and `var`.
pub fn reparam_node(g: &mut Graph, mu: Var, var: Var, eps: &Tensor) -> Var {
    let e = g.constant(eps.clone());
    let sd = g.sqrt(var);
    let noise = g.mul(sd, e);
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_identical_is_zero() {
        let m = Tensor::row(vec![0.3, -1.0]);
        let v = Tensor::row(vec![0.5, 2.0]);
        assert_eq!(gaussian_kl(&m, &v, &m, &v).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift() {
        let kl = gaussian_kl(
            &Tensor::row(vec![1.0]),
            &Tensor::row(vec![1.0]),
            &Tensor::row(vec![0.0]),
            &Tensor::row(vec![1.0]),
        )
        .unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_non_positive_variance() {
        let m = Tensor::row(vec![0.0]);
        assert!(gaussian_kl(&m, &Tensor::row(vec![0.0]), &m, &Tensor::row(vec![1.0])).is_err());
        assert!(gaussian_kl(&m, &Tensor::row(vec![1.0]), &m, &Tensor::row(vec![-1.0])).is_err());
    }

    #[test]
    fn zero_variance_sample_is_mean() {
        let mu = Tensor::row(vec![1.5, -2.0, 0.25]);
        let s = reparam_sample(&mu, &Tensor::zeros(&[1, 3]), 9).unwrap();
        assert_eq!(s, mu);
    }

    #[test]
    fn sample_is_seeded() {
        let mu = Tensor::zeros(&[2, 4]);
        let var = Tensor::full(&[2, 4], 2.0);
        assert_eq!(reparam_sample(&mu, &var, 5).unwrap(), reparam_sample(&mu, &var, 5).unwrap());
        assert_ne!(reparam_sample(&mu, &var, 5).unwrap(), reparam_sample(&mu, &var, 6).unwrap());
        assert!(reparam_sample(&mu, &Tensor::full(&[2, 4], -1.0), 5).is_err());
    }

    #[test]
    fn sample_mean_concentrates() {
        let n = 100_000;
        let mu = Tensor::full(&[n, 1], 0.7);
        let var = Tensor::full(&[n, 1], 4.0);
        let s = reparam_sample(&mu, &var, 11).unwrap();
        let mean = s.sum() / n as f64;
        let std_err = (4.0f64 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 4.0 * std_err, "mean {mean}");
    }
}
