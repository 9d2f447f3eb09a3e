//! Small dense helpers and a matrix-free conjugate gradient solver.

use crate::error::{CboError, Result};
use crate::problem::Vector;

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vector,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Solves `A x = b` for a symmetric positive definite operator given only through
/// matrix-vector products.
///
/// Stops once `‖b − A x‖ ≤ tol·‖b‖`. A non-positive curvature `pᵀAp ≤ 0` along a
/// search direction aborts with [`CboError::NotPositiveDefinite`]; running out of
/// iterations aborts with [`CboError::SolverFailure`] carrying the last residual norm.
pub fn conjugate_gradient<A>(apply: A, b: &Vector, tol: f64, max_iters: usize) -> Result<CgSolution>
where
    A: Fn(&Vector) -> Vector,
{
    let b_norm = b.norm();
    let mut x = Vector::zeros(b.len());
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: 0.0,
        });
    }
    if !b_norm.is_finite() {
        return Err(CboError::NonFinite {
            context: "conjugate gradient right-hand side",
        });
    }
    let target = tol * b_norm;
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r);

    for it in 0..max_iters {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if !curvature.is_finite() {
            return Err(CboError::NonFinite {
                context: "conjugate gradient operator",
            });
        }
        if curvature <= 0.0 {
            return Err(CboError::NotPositiveDefinite { curvature });
        }
        let step = rs_old / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= target {
            // recompute the true residual; the recursive one drifts on ill-conditioned systems
            let true_res = (b - apply(&x)).norm();
            if true_res <= target {
                return Ok(CgSolution {
                    x,
                    iterations: it + 1,
                    residual_norm: true_res,
                });
            }
            r = b - apply(&x);
            p = r.clone();
            rs_old = r.dot(&r);
            continue;
        }
        p = &r + (rs_new / rs_old) * &p;
        rs_old = rs_new;
    }

    let residual = (b - apply(&x)).norm();
    if residual <= target {
        return Ok(CgSolution {
            x,
            iterations: max_iters,
            residual_norm: residual,
        });
    }
    Err(CboError::SolverFailure {
        iterations: max_iters,
        residual,
    })
}

/// Relative error `‖a − b‖ / ‖b‖`, falling back to the absolute error when `‖b‖` is tiny.
pub fn relative_error(a: &Vector, b: &Vector) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub(crate) fn ensure_finite(v: &Vector, context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CboError::NonFinite { context })
    }
}
