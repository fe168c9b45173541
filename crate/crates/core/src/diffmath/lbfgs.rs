//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use super::optim::{dot, norm2};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    /// Stop once the Euclidean gradient norm falls to this value.
    pub tolerance: f64,
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-8,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub point: Tensor,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the line search gave up; `point` is the best iterate.
    pub line_search_failed: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

fn cubic_min(a: &Probe, b: &Probe) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    fn probe(&mut self, alpha: f64) -> Probe {
        let trial: Vec<f64> = self.x.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let (value, grad) = (self.f)(&trial);
        let slope = dot(&grad, self.dir);
        self.budget = self.budget.saturating_sub(1);
        Probe {
            alpha,
            value,
            slope,
            grad,
        }
    }

    fn armijo_ok(&self, p: &Probe) -> bool {
        p.value.is_finite() && p.value <= self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature_ok(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    fn run(&mut self, alpha0: f64) -> Option<Probe> {
        let origin = Probe {
            alpha: 0.0,
            value: self.f0,
            slope: self.slope0,
            grad: Vec::new(),
        };
        let mut prev = origin;
        let mut alpha = alpha0;
        let mut first = true;
        while self.budget > 0 {
            let cur = self.probe(alpha);
            if !cur.value.is_finite() {
                // step into an invalid region: shrink
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
            if !self.armijo_ok(&cur) || (!first && cur.value >= prev.value) {
                return self.zoom(prev, cur);
            }
            if self.curvature_ok(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = cur.alpha * 2.0;
            prev = cur;
        }
        // budget spent while extrapolating: keep the furthest acceptable step
        (prev.alpha > 0.0).then_some(prev)
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        while self.budget > 0 {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1.0) {
                break;
            }
            let mut alpha = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
            if !(alpha > a + 0.1 * width && alpha < b - 0.1 * width) {
                alpha = 0.5 * (a + b);
            }
            let cur = self.probe(alpha);
            if !self.armijo_ok(&cur) || cur.value >= lo.value {
                hi = cur;
            } else {
                if self.curvature_ok(&cur) {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        // fall back to the best point found if it makes sufficient progress
        (lo.alpha > 0.0 && self.armijo_ok(&lo)).then_some(lo)
    }
}

/// Minimize a smooth objective. `objective` returns value and gradient.
pub fn lbfgs_minimize<F>(mut objective: F, init: &Tensor, config: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = init.values().to_vec();
    let (mut fx, mut gx) = objective(&x);
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut converged = norm2(&gx) <= config.tolerance;

    while !converged && iterations < config.max_iters {
        // two-loop recursion
        let mut q: Vec<f64> = gx.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir = q;
        let mut slope = dot(&gx, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir = gx.iter().map(|g| -g).collect();
            slope = dot(&gx, &dir);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / norm2(&gx)).min(1.0)
        } else {
            1.0
        };

        let found = LineSearch {
            f: &mut objective,
            x: &x,
            dir: &dir,
            f0: fx,
            slope0: slope,
            c1: config.c1,
            c2: config.c2,
            budget: config.max_line_search,
        }
        .run(alpha0);

        let Some(step) = found else {
            line_search_failed = true;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = dir.iter().map(|d| step.alpha * d).collect();
        let y: Vec<f64> = step.grad.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let decrease = fx - step.value;
        fx = step.value;
        gx = step.grad;
        trace.push(fx);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if pairs.len() == config.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        converged = norm2(&gx) <= config.tolerance;
        if !converged && decrease <= f64::EPSILON * fx.abs().max(1e-300) {
            // no representable progress left
            break;
        }
    }

    LbfgsOutcome {
        point: Tensor::new(init.shape().to_vec(), x).expect("same length"),
        value: fx,
        grad_norm: norm2(&gx),
        iterations,
        converged,
        line_search_failed,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let cfg = LbfgsConfig {
            max_iters: 500,
            tolerance: 1e-10,
            ..Default::default()
        };
        let out = lbfgs_minimize(rosenbrock, &Tensor::row(vec![-1.2, 1.0]), &cfg);
        let p = out.point.values();
        assert!((p[0] - 1.0).abs() < 1e-5 && (p[1] - 1.0).abs() < 1e-5, "{p:?}");
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn starting_at_minimum_takes_no_steps() {
        let out = lbfgs_minimize(rosenbrock, &Tensor::row(vec![1.0, 1.0]), &LbfgsConfig::default());
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
        assert_eq!(out.point.values(), &[1.0, 1.0]);
    }

    #[test]
    fn unbounded_objective_flags_failure_or_stops() {
        // linear objective: every line search extrapolates until its budget runs out
        let out = lbfgs_minimize(
            |x: &[f64]| (x[0], vec![1.0]),
            &Tensor::row(vec![0.0]),
            &LbfgsConfig {
                max_iters: 5,
                ..Default::default()
            },
        );
        assert!(!out.converged);
        assert!(out.value < 0.0);
    }
}
