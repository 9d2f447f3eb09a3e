//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use cbo_core::barrier::{inner_solve, InnerMode, InnerSolveReport, InnerSolverOptions};
use cbo_core::hypergrad::composite_objective;
use cbo_core::problem::{
    BoxConstraint, CboProblem, InstanceDims, Matrix, ProblemInstance, Vector,
};
use cbo_core::testbed::quadratic::{OuterKind, QuadraticDims};
use rand::Rng;

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// `Σ w ℓ − r Σ w log(M w)` written out directly.
pub fn kl_objective(losses: &[f64], w: &[f64], r: f64) -> f64 {
    let m = losses.len() as f64;
    let mut total = 0.0;
    for (l, wi) in losses.iter().zip(w) {
        total += wi * l;
        if *wi > 0.0 {
            total -= r * wi * (m * wi).ln();
        }
    }
    total
}

/// Projected gradient ascent with a fixed step `0.1 / max(max|ℓ|, r)` on the
/// KL-regularized weights. Only reliable when no optimal weight is tiny.
pub fn pga_simplex_weights(losses: &[f64], r: f64, iters: usize) -> Vec<f64> {
    let m = losses.len();
    let scale = losses.iter().fold(r, |a, l| a.max(l.abs()));
    let step = 0.1 / scale;
    let mut w = vec![1.0 / m as f64; m];
    for _ in 0..iters {
        let trial: Vec<f64> = losses
            .iter()
            .zip(&w)
            .map(|(l, wi)| wi + step * (l - r * ((m as f64 * wi.max(1e-300)).ln() + 1.0)))
            .collect();
        w = project_simplex(&trial);
    }
    w
}

/// Maximizer of `w ℓ − r w log(M w) − λ w` over `w ∈ [0, 1]`, by bisection on the
/// derivative in `log w`.
fn coordinate_argmax(loss: f64, r: f64, m: f64, lambda: f64) -> f64 {
    let slope = |log_w: f64| loss - r * (m.ln() + log_w + 1.0) - lambda;
    if slope(0.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (-800.0f64, 0.0f64);
    if slope(lo) <= 0.0 {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Maximizer of the KL-regularized weighted loss over the simplex from the
/// stationarity conditions: bisection on the multiplier of `Σ w = 1`.
pub fn kkt_simplex_weights(losses: &[f64], r: f64) -> Vec<f64> {
    let m = losses.len() as f64;
    let total = |lambda: f64| -> f64 {
        losses.iter().map(|l| coordinate_argmax(*l, r, m, lambda)).sum()
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while total(lo) < 1.0 {
        lo *= 2.0;
    }
    while total(hi) > 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    losses.iter().map(|l| coordinate_argmax(*l, r, m, lambda)).collect()
}

/// Central differences, independent of the library helper.
pub fn central_difference<F: Fn(&Vector) -> f64>(f: F, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    for k in 0..x.len() {
        let mut up = x.clone();
        let mut down = x.clone();
        up[k] += h;
        down[k] -= h;
        g[k] = (f(&up) - f(&down)) / (2.0 * h);
    }
    g
}

pub fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Runs `steps` inner iterations for every instance from its box center.
pub fn solve_all(
    problem: &CboProblem,
    theta: &Vector,
    mode: InnerMode,
    alpha: Option<f64>,
    steps: usize,
) -> Vec<InnerSolveReport> {
    (0..problem.len())
        .map(|i| {
            let inst = problem.instance(i);
            let a = alpha.unwrap_or_else(|| inst.curvature_bounds().unwrap().optimal_step());
            let opts = InnerSolverOptions::gradient(a, steps);
            inner_solve(inst, mode, theta, inst.constraint().interior_point(), &opts).unwrap()
        })
        .collect()
}

/// `F(θ)` with every inner problem solved by `steps` iterations.
pub fn end_to_end_objective(
    problem: &CboProblem,
    theta: &Vector,
    mode: InnerMode,
    alpha: Option<f64>,
    steps: usize,
) -> f64 {
    let deltas: Vec<Vector> = solve_all(problem, theta, mode, alpha, steps)
        .into_iter()
        .map(|r| r.delta)
        .collect();
    composite_objective(problem, theta, &deltas).unwrap()
}

/// Random quadratic family shape with `d, p ≤ 20`, `M ≤ 50`.
pub fn random_quadratic_dims<R: Rng>(rng: &mut R, index: usize) -> QuadraticDims {
    QuadraticDims {
        d: rng.random_range(1..=20),
        p: rng.random_range(1..=20),
        m: rng.random_range(1..=3),
        instances: rng.random_range(1..=50),
        mu: rng.random_range(0.5..2.0),
        l: rng.random_range(2.0..6.0),
        curvature: rng.random_range(0.0..2.0),
        theta_reg: rng.random_range(0.1..1.0),
        box_half_width: 100.0,
        outer: if index % 2 == 0 { OuterKind::Log } else { OuterKind::Linear },
    }
}

/// Adds a constant to `g` of the wrapped instance.
pub struct Shifted {
    pub inner: Arc<dyn ProblemInstance>,
    pub shift: f64,
}

impl ProblemInstance for Shifted {
    fn dims(&self) -> InstanceDims {
        self.inner.dims()
    }
    fn g_value(&self, theta: &Vector, delta: &Vector) -> Vector {
        self.inner.g_value(theta, delta).add_scalar(self.shift)
    }
    fn g_jac_theta(&self, theta: &Vector, delta: &Vector) -> Matrix {
        self.inner.g_jac_theta(theta, delta)
    }
    fn g_jac_delta(&self, theta: &Vector, delta: &Vector) -> Matrix {
        self.inner.g_jac_delta(theta, delta)
    }
    fn h_value(&self, theta: &Vector, delta: &Vector) -> f64 {
        self.inner.h_value(theta, delta)
    }
    fn h_grad_delta(&self, theta: &Vector, delta: &Vector) -> Vector {
        self.inner.h_grad_delta(theta, delta)
    }
    fn h_hess_delta_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector {
        self.inner.h_hess_delta_vec(theta, delta, v)
    }
    fn h_cross_jac_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector {
        self.inner.h_cross_jac_vec(theta, delta, v)
    }
    fn constraint(&self) -> &BoxConstraint {
        self.inner.constraint()
    }
}

/// Brute-force maximizer of `γ ⋅ x'` over the corners of the attack box of `x`.
pub fn best_corner(grad: &Vector, x: &Vector, epsilon: f64) -> Vector {
    let p = x.len();
    let mut best = x.clone();
    let mut best_val = f64::NEG_INFINITY;
    for mask in 0..(1u32 << p) {
        let cand = Vector::from_fn(p, |k, _| {
            if mask >> k & 1 == 1 {
                (x[k] + epsilon).min(1.0)
            } else {
                (x[k] - epsilon).max(0.0)
            }
        });
        let val = grad.dot(&cand);
        if val > best_val {
            best_val = val;
            best = cand;
        }
    }
    best
}
