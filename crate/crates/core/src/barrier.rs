//! Log-barrier inner objectives, the inner projected-gradient solver and the barrier
//! curvature term that enters the implicit linear system.

use serde::{Deserialize, Serialize};

use crate::error::{CboError, Result};
use crate::problem::{BoxConstraint, ProblemInstance, Vector, STRICT_MARGIN};

/// A scalar inner objective in `δ` for fixed `θ`.
pub trait InnerFn: Sync {
    fn value(&self, theta: &Vector, delta: &Vector) -> f64;
    fn gradient(&self, theta: &Vector, delta: &Vector) -> Vector;
}

/// The inner objective `h_i` of a problem instance.
#[derive(Clone, Copy)]
pub struct InstanceInner<'a>(pub &'a dyn ProblemInstance);

impl InnerFn for InstanceInner<'_> {
    fn value(&self, theta: &Vector, delta: &Vector) -> f64 {
        self.0.h_value(theta, delta)
    }

    fn gradient(&self, theta: &Vector, delta: &Vector) -> Vector {
        self.0.h_grad_delta(theta, delta)
    }
}

/// `base(θ, δ) − c Σ_k log(b_k − a_kᵀδ)`.
#[derive(Clone, Copy)]
pub struct BarrierObjective<'a> {
    pub base: &'a dyn InnerFn,
    pub constraint: &'a BoxConstraint,
    pub c: f64,
}

impl<'a> BarrierObjective<'a> {
    pub fn new(base: &'a dyn InnerFn, constraint: &'a BoxConstraint, c: f64) -> Self {
        Self { base, constraint, c }
    }

    fn checked_margins(&self, delta: &Vector) -> Result<Vector> {
        if delta.len() != self.constraint.dim() {
            return Err(CboError::DimensionMismatch(format!(
                "delta has length {}, box has dimension {}",
                delta.len(),
                self.constraint.dim()
            )));
        }
        let margins = self.constraint.margins(delta);
        let min = margins.min();
        if !(min > 0.0) {
            return Err(CboError::BoundaryViolation { margin: min });
        }
        Ok(margins)
    }
}

pub fn barrier_value(obj: &BarrierObjective<'_>, theta: &Vector, delta: &Vector) -> Result<f64> {
    let margins = obj.checked_margins(delta)?;
    let base = obj.base.value(theta, delta);
    if obj.c == 0.0 {
        return Ok(base);
    }
    let log_sum: f64 = margins.iter().map(|m| m.ln()).sum();
    Ok(base - obj.c * log_sum)
}

pub fn barrier_gradient(obj: &BarrierObjective<'_>, theta: &Vector, delta: &Vector) -> Result<Vector> {
    let margins = obj.checked_margins(delta)?;
    let p = delta.len();
    let mut grad = obj.base.gradient(theta, delta);
    // rows k < p are +e_k, rows p + k are −e_k
    for k in 0..p {
        grad[k] += obj.c * (1.0 / margins[k] - 1.0 / margins[p + k]);
    }
    Ok(grad)
}

/// Diagonal of `C = c Σ_k γ_k a_k a_kᵀ` with `γ_k = 1/(b_k − a_kᵀδ̂)²`, which for the
/// stacked box reduces to `c (γ_k + γ_{p+k})` per coordinate.
pub fn barrier_curvature_diag(constraint: &BoxConstraint, c: f64, delta_hat: &Vector) -> Result<Vector> {
    let margins = constraint.margins(delta_hat);
    let min = margins.min();
    if !(min > 0.0) {
        return Err(CboError::BoundaryViolation { margin: min });
    }
    let p = constraint.dim();
    Ok(Vector::from_fn(p, |k, _| {
        c * (margins[k].powi(-2) + margins[p + k].powi(-2))
    }))
}

/// What the inner loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerMode {
    /// Raw `h` with Euclidean projection onto the box.
    Projected,
    /// `h` plus the log-barrier with coefficient `c`, kept strictly feasible.
    Barrier { c: f64 },
}

impl InnerMode {
    pub fn barrier_coefficient(&self) -> f64 {
        match *self {
            InnerMode::Projected => 0.0,
            InnerMode::Barrier { c } => c,
        }
    }
}

/// Direction rule for each inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `δ − α∇`. The only rule with a convergence guarantee.
    Gradient,
    /// `δ − α sign(∇)`; heuristic.
    Sign,
    /// Adaptive-moment steps; heuristic.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolverOptions {
    pub alpha: f64,
    pub steps: usize,
    pub rule: UpdateRule,
    pub record_trajectory: bool,
}

impl InnerSolverOptions {
    pub fn gradient(alpha: f64, steps: usize) -> Self {
        Self {
            alpha,
            steps,
            rule: UpdateRule::Gradient,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolveReport {
    pub delta: Vector,
    pub iterations: usize,
    /// Gradient norm of the minimized objective at `delta` (the gradient mapping in
    /// projected mode).
    pub final_grad_norm: f64,
    pub min_margin: f64,
    /// `‖δ^k − δ^{k−1}‖` per accepted step.
    pub step_norms: Vec<f64>,
    /// Feasibility/descent halvings performed by the safeguard.
    pub backtracks: usize,
    /// Iterates `δ^0..δ^K` when requested.
    pub trajectory: Vec<Vector>,
}

impl InnerSolveReport {
    /// Geometric mean of successive step-norm ratios, when at least two steps moved.
    pub fn contraction_estimate(&self) -> Option<f64> {
        let steps: Vec<f64> = self.step_norms.iter().copied().filter(|s| *s > 0.0).collect();
        if steps.len() < 2 {
            return None;
        }
        let first = steps[0];
        let last = steps[steps.len() - 1];
        Some((last / first).powf(1.0 / (steps.len() - 1) as f64))
    }
}

const MAX_HALVINGS: usize = 60;
const DESCENT_SLACK: f64 = 1e-12;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Runs `K` inner steps from `delta0` on `h_i(θ, ·)` (projected mode) or on the
/// barrier objective (barrier mode).
///
/// Barrier mode backtracks each step toward the previous iterate until the new point
/// keeps every margin `≥ 1e-12` and does not increase the barrier objective; a step
/// that cannot satisfy both after 60 halvings is rejected.
pub fn inner_solve(
    inst: &dyn ProblemInstance,
    mode: InnerMode,
    theta: &Vector,
    delta0: &Vector,
    opts: &InnerSolverOptions,
) -> Result<InnerSolveReport> {
    let constraint = inst.constraint();
    if delta0.len() != constraint.dim() {
        return Err(CboError::DimensionMismatch(format!(
            "delta0 has length {}, box has dimension {}",
            delta0.len(),
            constraint.dim()
        )));
    }
    if !(opts.alpha > 0.0) || !opts.alpha.is_finite() {
        return Err(CboError::InvalidArgument(format!(
            "inner stepsize must be positive, got {}",
            opts.alpha
        )));
    }
    match mode {
        InnerMode::Projected => solve_projected(inst, theta, delta0, opts),
        InnerMode::Barrier { c } => {
            if !(c >= 0.0) {
                return Err(CboError::InvalidArgument(format!("barrier coefficient must be ≥ 0, got {c}")));
            }
            let base = InstanceInner(inst);
            let obj = BarrierObjective::new(&base, constraint, c);
            solve_barrier(&obj, theta, delta0, opts)
        }
    }
}

struct Adam {
    m: Vector,
    v: Vector,
    t: i32,
}

impl Adam {
    fn new(p: usize) -> Self {
        Self {
            m: Vector::zeros(p),
            v: Vector::zeros(p),
            t: 0,
        }
    }

    fn direction(&mut self, grad: &Vector) -> Vector {
        self.t += 1;
        self.m = ADAM_BETA1 * &self.m + (1.0 - ADAM_BETA1) * grad;
        self.v = ADAM_BETA2 * &self.v + (1.0 - ADAM_BETA2) * grad.component_mul(grad);
        let mc = 1.0 - ADAM_BETA1.powi(self.t);
        let vc = 1.0 - ADAM_BETA2.powi(self.t);
        Vector::from_fn(grad.len(), |k, _| (self.m[k] / mc) / ((self.v[k] / vc).sqrt() + ADAM_EPS))
    }
}

fn step_direction(rule: UpdateRule, grad: &Vector, adam: &mut Adam) -> Vector {
    match rule {
        UpdateRule::Gradient => grad.clone(),
        UpdateRule::Sign => grad.map(|g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }),
        UpdateRule::Adam => adam.direction(grad),
    }
}

fn check_grad(grad: &Vector) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(CboError::NonFinite {
            context: "inner gradient",
        })
    }
}

fn solve_projected(
    inst: &dyn ProblemInstance,
    theta: &Vector,
    delta0: &Vector,
    opts: &InnerSolverOptions,
) -> Result<InnerSolveReport> {
    let constraint = inst.constraint();
    let mut delta = constraint.project(delta0);
    let mut adam = Adam::new(delta.len());
    let mut step_norms = Vec::with_capacity(opts.steps);
    let mut trajectory = Vec::new();
    if opts.record_trajectory {
        trajectory.push(delta.clone());
    }
    for _ in 0..opts.steps {
        let grad = inst.h_grad_delta(theta, &delta);
        check_grad(&grad)?;
        let dir = step_direction(opts.rule, &grad, &mut adam);
        let next = constraint.project(&(&delta - opts.alpha * dir));
        step_norms.push((&next - &delta).norm());
        delta = next;
        if opts.record_trajectory {
            trajectory.push(delta.clone());
        }
    }
    let grad = inst.h_grad_delta(theta, &delta);
    check_grad(&grad)?;
    let mapped = constraint.project(&(&delta - opts.alpha * &grad));
    let final_grad_norm = (&delta - mapped).norm() / opts.alpha;
    Ok(InnerSolveReport {
        min_margin: constraint.min_margin(&delta),
        delta,
        iterations: opts.steps,
        final_grad_norm,
        step_norms,
        backtracks: 0,
        trajectory,
    })
}

/// Inner solve on an explicit barrier objective (see [`inner_solve`]).
pub fn solve_barrier(
    obj: &BarrierObjective<'_>,
    theta: &Vector,
    delta0: &Vector,
    opts: &InnerSolverOptions,
) -> Result<InnerSolveReport> {
    let constraint = obj.constraint;
    let start_margin = constraint.min_margin(delta0);
    if !(start_margin > 0.0) {
        return Err(CboError::BoundaryViolation { margin: start_margin });
    }
    let mut delta = delta0.clone();
    let mut value = barrier_value(obj, theta, &delta)?;
    let mut adam = Adam::new(delta.len());
    let mut step_norms = Vec::with_capacity(opts.steps);
    let mut trajectory = Vec::new();
    let mut backtracks = 0;
    if opts.record_trajectory {
        trajectory.push(delta.clone());
    }

    for _ in 0..opts.steps {
        let grad = barrier_gradient(obj, theta, &delta)?;
        check_grad(&grad)?;
        let dir = step_direction(opts.rule, &grad, &mut adam);
        let target = constraint.project(&(&delta - opts.alpha * dir));
        let full_step = &target - &delta;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &delta + scale * &full_step;
            if constraint.min_margin(&candidate) >= STRICT_MARGIN {
                let cand_value = barrier_value(obj, theta, &candidate)?;
                if cand_value.is_finite() && cand_value <= value + DESCENT_SLACK {
                    accepted = Some((candidate, cand_value));
                    break;
                }
            }
            scale *= 0.5;
            backtracks += 1;
        }
        match accepted {
            Some((next, next_value)) => {
                step_norms.push((&next - &delta).norm());
                delta = next;
                value = next_value;
            }
            None => step_norms.push(0.0),
        }
        if opts.record_trajectory {
            trajectory.push(delta.clone());
        }
    }

    let grad = barrier_gradient(obj, theta, &delta)?;
    check_grad(&grad)?;
    Ok(InnerSolveReport {
        min_margin: constraint.min_margin(&delta),
        delta,
        iterations: opts.steps,
        final_grad_norm: grad.norm(),
        step_norms,
        backtracks,
        trajectory,
    })
}
