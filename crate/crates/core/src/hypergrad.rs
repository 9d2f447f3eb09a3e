//! Implicit hypergradients.
//!
//! For an inner minimizer `δ*(θ)` of `h(θ, ·)` the total derivative of `g(θ, δ*(θ))` is
//! `∇_θ g − ∇_θ∇_δ h · v` where `v` solves `S v = ∇_δ g`. In projected mode `S` is the
//! inner Hessian `∇²_δ h`; in barrier mode `S = ∇²_δ h + C` with `C` the diagonal
//! barrier curvature. With `neglect_inner_hessian` the Hessian part is dropped and
//! `S = C`, which is inverted exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{barrier_curvature_diag, InnerMode, InnerSolveReport};
use crate::dro::{logsumexp_objective, optimal_weights, DroParams};
use crate::error::{CboError, Result};
use crate::linalg::{conjugate_gradient, ensure_finite};
use crate::problem::{CboProblem, InstanceLink, Matrix, ProblemInstance, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    /// Inverts the diagonal barrier curvature; requires `neglect_inner_hessian`.
    ExactDiagonal,
    /// Matrix-free CG on Hessian-vector products plus the diagonal.
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergradConfig {
    pub linear_solver: LinearSolver,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub neglect_inner_hessian: bool,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self {
            linear_solver: LinearSolver::ConjugateGradient,
            cg_tol: 1e-10,
            cg_max_iters: 500,
            neglect_inner_hessian: false,
        }
    }
}

impl HypergradConfig {
    /// Diagonal-only system, the setting for piecewise-linear attack losses.
    pub fn hessian_free() -> Self {
        Self {
            linear_solver: LinearSolver::ExactDiagonal,
            neglect_inner_hessian: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol > 0.0) {
            return Err(CboError::InvalidArgument(format!("cg_tol must be positive, got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(CboError::InvalidArgument("cg_max_iters must be at least 1".into()));
        }
        if self.linear_solver == LinearSolver::ExactDiagonal && !self.neglect_inner_hessian {
            return Err(CboError::InvalidArgument(
                "the exact-diagonal solver only applies when the inner Hessian is neglected".into(),
            ));
        }
        Ok(())
    }
}

/// Solves the implicit system for one right-hand side.
fn solve_system(
    inst: &dyn ProblemInstance,
    theta: &Vector,
    delta_hat: &Vector,
    diag: &Vector,
    rhs: &Vector,
    cfg: &HypergradConfig,
) -> Result<Vector> {
    if cfg.neglect_inner_hessian {
        if let Some(k) = diag.iter().position(|c| !(*c > 0.0)) {
            return Err(CboError::NotPositiveDefinite { curvature: diag[k] });
        }
        return match cfg.linear_solver {
            LinearSolver::ExactDiagonal => Ok(rhs.component_div(diag)),
            LinearSolver::ConjugateGradient => {
                Ok(conjugate_gradient(|v| v.component_mul(diag), rhs, cfg.cg_tol, cfg.cg_max_iters)?.x)
            }
        };
    }
    let apply = |v: &Vector| inst.h_hess_delta_vec(theta, delta_hat, v) + v.component_mul(diag);
    Ok(conjugate_gradient(apply, rhs, cfg.cg_tol, cfg.cg_max_iters)?.x)
}

/// `∂g(θ, δ*(θ))/∂θ` evaluated at the approximate minimizer `delta_hat`, as a `d × m`
/// matrix (one column per output of `g`).
pub fn instance_hypergrad(
    inst: &dyn ProblemInstance,
    theta: &Vector,
    delta_hat: &Vector,
    mode: InnerMode,
    cfg: &HypergradConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    let constraint = inst.constraint();
    let margin = constraint.min_margin(delta_hat);
    if !(margin > 0.0) {
        return Err(CboError::BoundaryViolation { margin });
    }
    let diag = match mode {
        InnerMode::Barrier { c } => barrier_curvature_diag(constraint, c, delta_hat)?,
        InnerMode::Projected => Vector::zeros(constraint.dim()),
    };
    let rhs = inst.g_jac_delta(theta, delta_hat);
    let mut jac = inst.g_jac_theta(theta, delta_hat);
    for j in 0..rhs.ncols() {
        let col = rhs.column(j).into_owned();
        if col.iter().all(|x| *x == 0.0) {
            continue;
        }
        let v = solve_system(inst, theta, delta_hat, &diag, &col, cfg)?;
        let correction = inst.h_cross_jac_vec(theta, delta_hat, &v);
        let mut out = jac.column_mut(j);
        out -= correction;
    }
    if jac.iter().any(|x| !x.is_finite()) {
        return Err(CboError::NonFinite { context: "instance hypergradient" });
    }
    Ok(jac)
}

/// Raw `g_i` and its implicit Jacobian at one inner solution.
#[derive(Debug, Clone)]
pub struct InstanceTerms {
    pub index: usize,
    pub g: Vector,
    pub jacobian: Matrix,
}

pub fn instance_terms(
    problem: &CboProblem,
    index: usize,
    theta: &Vector,
    delta: &Vector,
    mode: InnerMode,
    cfg: &HypergradConfig,
) -> Result<InstanceTerms> {
    let inst = problem.instance(index);
    let g = inst.g_value(theta, delta);
    ensure_finite(&g, "instance value g")?;
    let jacobian = instance_hypergrad(inst, theta, delta, mode, cfg)?;
    Ok(InstanceTerms { index, g, jacobian })
}

/// Linked batch mean `(1/|B|) Σ link(g_i)` and the matching Jacobian
/// `(1/|B|) Σ J_i diag(link′(g_i))`.
pub fn batch_means(problem: &CboProblem, terms: &[InstanceTerms]) -> Result<(Vector, Matrix)> {
    let first = terms
        .first()
        .ok_or_else(|| CboError::InvalidArgument("empty batch".into()))?;
    let n = terms.len() as f64;
    let mut g_mean = Vector::zeros(first.g.len());
    let mut j_mean = Matrix::zeros(first.jacobian.nrows(), first.jacobian.ncols());
    let link = problem.link();
    for t in terms {
        g_mean += link.apply(&t.g);
        let scale = link.derivative(&t.g);
        j_mean += &t.jacobian * Matrix::from_diagonal(&scale);
    }
    g_mean /= n;
    j_mean /= n;
    ensure_finite(&g_mean, "linked batch mean")?;
    if j_mean.iter().any(|x| !x.is_finite()) {
        return Err(CboError::NonFinite { context: "batch Jacobian" });
    }
    Ok((g_mean, j_mean))
}

/// `∇F` from per-instance terms covering the whole problem (or a batch standing in for
/// it).
///
/// With an exponential link `exp(ℓ/r)` and `f = s log`, the ratio
/// `s Σ_i J_i exp(ℓ_i/r)/r ÷ Σ_i exp(ℓ_i/r)` is evaluated as `(s/r) Σ_i w_i J_i` with
/// `w = softmax(ℓ/r)` taken in max-shifted form, so no raw exponential is formed.
pub fn assemble_total_gradient(problem: &CboProblem, terms: &[InstanceTerms]) -> Result<Vector> {
    if terms.is_empty() {
        return Err(CboError::InvalidArgument("no instance terms".into()));
    }
    if let Some((r, scale)) = log_domain(problem) {
        let losses = Vector::from_iterator(terms.len(), terms.iter().map(|t| t.g[0]));
        let w = optimal_weights(&losses, DroParams::new(r)?)?;
        let mut grad = Vector::zeros(problem.dims().d);
        for (wi, t) in w.as_vector().iter().zip(terms) {
            grad.axpy(*wi, &t.jacobian.column(0), 1.0);
        }
        grad *= scale / r;
        ensure_finite(&grad, "total gradient")?;
        return Ok(grad);
    }
    let (g_mean, j_mean) = batch_means(problem, terms)?;
    let grad = j_mean * problem.outer().gradient(&g_mean);
    ensure_finite(&grad, "total gradient")?;
    Ok(grad)
}

/// `(r, s)` when the problem is `s log(mean exp(g/r))` with scalar `g`.
fn log_domain(problem: &CboProblem) -> Option<(f64, f64)> {
    match (problem.link(), problem.outer().log_scale()) {
        (InstanceLink::Exp { r }, Some(scale)) if problem.dims().m == 1 => Some((r, scale)),
        _ => None,
    }
}

/// The total gradient `∇F(θ)` of the full problem from one inner report per instance.
///
/// Per-instance work runs in parallel; the reduction is sequential in instance order.
pub fn done_total_gradient(
    problem: &CboProblem,
    theta: &Vector,
    inner_reports: &[InnerSolveReport],
    mode: InnerMode,
    cfg: &HypergradConfig,
) -> Result<Vector> {
    if inner_reports.len() != problem.len() {
        return Err(CboError::DimensionMismatch(format!(
            "{} inner reports for {} instances",
            inner_reports.len(),
            problem.len()
        )));
    }
    let terms = inner_reports
        .par_iter()
        .enumerate()
        .map(|(i, rep)| instance_terms(problem, i, theta, &rep.delta, mode, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble_total_gradient(problem, &terms)
}

/// `F(θ) = f((1/M) Σ link(g_i(θ, δ_i)))` at the given inner points.
pub fn composite_objective(problem: &CboProblem, theta: &Vector, deltas: &[Vector]) -> Result<f64> {
    if deltas.len() != problem.len() {
        return Err(CboError::DimensionMismatch(format!(
            "{} inner points for {} instances",
            deltas.len(),
            problem.len()
        )));
    }
    let raw: Vec<Vector> = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| problem.instance(i).g_value(theta, d))
        .collect();
    objective_from_values(problem, &raw)
}

/// `f` of the linked mean of raw instance values.
pub fn objective_from_values(problem: &CboProblem, raw: &[Vector]) -> Result<f64> {
    if raw.is_empty() {
        return Err(CboError::InvalidArgument("no instance values".into()));
    }
    if let Some((r, scale)) = log_domain(problem) {
        let losses = Vector::from_iterator(raw.len(), raw.iter().map(|g| g[0]));
        return Ok(scale / r * logsumexp_objective(&losses, DroParams::new(r)?)?);
    }
    let mut mean = Vector::zeros(raw[0].len());
    for g in raw {
        mean += problem.link().apply(g);
    }
    mean /= raw.len() as f64;
    ensure_finite(&mean, "linked mean")?;
    let value = problem.outer().evaluate(&mean);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CboError::NonFinite { context: "outer objective" })
    }
}
