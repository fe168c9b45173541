//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (seeded subsample).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compare analytic and central-difference gradients of `f` at `params`.
/// Only trainable parameters are checked.
pub fn grad_check<F>(f: F, params: &ParamSet, epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, ParamSet)>,
{
    grad_check_with(
        f,
        params,
        &GradCheckConfig {
            epsilon,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(mut f: F, params: &ParamSet, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, ParamSet)>,
{
    if !(config.epsilon > 0.0) {
        return Err(Error::Domain("grad_check epsilon must be positive".into()));
    }
    let (f0, analytic) = f(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("grad_check: f = {f0} at the base point"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let names: Vec<String> = params
        .names()
        .filter(|n| params.is_trainable(n))
        .map(str::to_string)
        .collect();
    let mut work = params.clone();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let coords: Vec<usize> = match config.max_coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = params.get(&name).unwrap().values()[i];
            work.get_mut(&name).unwrap().values_mut()[i] = orig + config.epsilon;
            let (fp, _) = f(&work)?;
            work.get_mut(&name).unwrap().values_mut()[i] = orig - config.epsilon;
            let (fm, _) = f(&work)?;
            work.get_mut(&name).unwrap().values_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    detail: format!("grad_check: non-finite value perturbing {name}[{i}]"),
                });
            }
            let numeric = (fp - fm) / (2.0 * config.epsilon);
            let a = analytic.get(&name).map(|t| t.values()[i]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
