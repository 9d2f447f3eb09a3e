//! Quadratic CBO problems with closed-form inner minimizers.
//!
//! Instance `i` has
//!
//! ```text
//! h_i(θ, δ) = ½ (δ − P_i θ − c_i)ᵀ D_i (δ − P_i θ − c_i)        ⇒  δ*_i(θ) = P_i θ + c_i
//! g_i(θ, δ) = s_i + Q_i δ + (κ/2 ‖δ − a_i‖² + ρ/2 ‖θ‖²) 1_m
//! ```
//!
//! so `F` and `∇F` follow from the chain rule without any inner solve.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CboError, Result};
use crate::problem::{
    BoxConstraint, CboProblem, CurvatureBounds, InstanceDims, InstanceLink, LinearOuter, LogOuter, Matrix,
    OuterScalarFn, ProblemConstants, ProblemInstance, Vector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterKind {
    /// `f(z) = Σ_j z_j`.
    Linear,
    /// `f(z) = Σ_j log z_j` on `z ≥ 1`.
    Log,
}

impl OuterKind {
    fn build(self, m: usize) -> Arc<dyn OuterScalarFn> {
        match self {
            OuterKind::Linear => Arc::new(LinearOuter::new(Vector::from_element(m, 1.0))),
            OuterKind::Log => Arc::new(LogOuter::new(1.0, 1.0)),
        }
    }
}

/// Explicit parameters of one quadratic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInstanceSpec {
    /// `p × d`.
    pub shift: Matrix,
    /// `c_i`, length `p`.
    pub center: Vector,
    /// SPD `p × p`.
    pub hessian: Matrix,
    /// `m × p` linear part of `g`.
    pub linear: Matrix,
    /// `a_i`, length `p`.
    pub anchor: Vector,
    /// `κ ≥ 0`.
    pub curvature: f64,
    /// `ρ ≥ 0`.
    pub theta_reg: f64,
    /// `s_i`, length `m`.
    pub offset: Vector,
    pub box_half_width: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticInstance {
    spec: QuadraticInstanceSpec,
    constraint: BoxConstraint,
    bounds: CurvatureBounds,
}

impl QuadraticInstance {
    pub fn new(spec: QuadraticInstanceSpec) -> Result<Self> {
        let (p, d) = spec.shift.shape();
        let m = spec.linear.nrows();
        let shapes_ok = spec.center.len() == p
            && spec.hessian.shape() == (p, p)
            && spec.linear.ncols() == p
            && spec.anchor.len() == p
            && spec.offset.len() == m
            && d > 0
            && m > 0;
        if !shapes_ok {
            return Err(CboError::DimensionMismatch("inconsistent quadratic instance shapes".into()));
        }
        if (&spec.hessian - spec.hessian.transpose()).norm() > 1e-10 * spec.hessian.norm().max(1.0) {
            return Err(CboError::InvalidArgument("inner Hessian must be symmetric".into()));
        }
        let eig = spec.hessian.clone().symmetric_eigen().eigenvalues;
        let mu = eig.min();
        if !(mu > 0.0) {
            return Err(CboError::InvalidArgument(format!(
                "inner Hessian must be positive definite (λ_min = {mu})"
            )));
        }
        let constraint = BoxConstraint::symmetric(p, spec.box_half_width)?;
        Ok(Self {
            bounds: CurvatureBounds { mu, l: eig.max() },
            spec,
            constraint,
        })
    }

    pub fn spec(&self) -> &QuadraticInstanceSpec {
        &self.spec
    }

    pub fn delta_star(&self, theta: &Vector) -> Vector {
        &self.spec.shift * theta + &self.spec.center
    }

    /// `d × m` Jacobian of `θ ↦ g(θ, δ*(θ))`.
    pub fn composed_jacobian(&self, theta: &Vector) -> Matrix {
        let star = self.delta_star(theta);
        let m = self.spec.linear.nrows();
        let ones = Matrix::from_element(1, m, 1.0);
        let direct = self.spec.theta_reg * theta * &ones;
        let through_delta = self.g_jac_delta(theta, &star);
        direct + self.spec.shift.transpose() * through_delta
    }
}

impl ProblemInstance for QuadraticInstance {
    fn dims(&self) -> InstanceDims {
        InstanceDims {
            d: self.spec.shift.ncols(),
            p: self.spec.shift.nrows(),
            m: self.spec.linear.nrows(),
        }
    }

    fn g_value(&self, theta: &Vector, delta: &Vector) -> Vector {
        let quad = 0.5 * self.spec.curvature * (delta - &self.spec.anchor).norm_squared()
            + 0.5 * self.spec.theta_reg * theta.norm_squared();
        (&self.spec.offset + &self.spec.linear * delta).add_scalar(quad)
    }

    fn g_jac_theta(&self, theta: &Vector, _delta: &Vector) -> Matrix {
        let m = self.spec.linear.nrows();
        self.spec.theta_reg * theta * Matrix::from_element(1, m, 1.0)
    }

    fn g_jac_delta(&self, _theta: &Vector, delta: &Vector) -> Matrix {
        let m = self.spec.linear.nrows();
        let pull = self.spec.curvature * (delta - &self.spec.anchor);
        self.spec.linear.transpose() + pull * Matrix::from_element(1, m, 1.0)
    }

    fn h_value(&self, theta: &Vector, delta: &Vector) -> f64 {
        let e = delta - self.delta_star(theta);
        0.5 * e.dot(&(&self.spec.hessian * &e))
    }

    fn h_grad_delta(&self, theta: &Vector, delta: &Vector) -> Vector {
        &self.spec.hessian * (delta - self.delta_star(theta))
    }

    fn h_hess_delta_vec(&self, _theta: &Vector, _delta: &Vector, v: &Vector) -> Vector {
        &self.spec.hessian * v
    }

    fn h_cross_jac_vec(&self, _theta: &Vector, _delta: &Vector, v: &Vector) -> Vector {
        -(self.spec.shift.transpose() * (&self.spec.hessian * v))
    }

    fn constraint(&self) -> &BoxConstraint {
        &self.constraint
    }

    fn curvature_bounds(&self) -> Option<CurvatureBounds> {
        Some(self.bounds)
    }
}

/// Shape and conditioning of a random quadratic family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDims {
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub instances: usize,
    pub mu: f64,
    pub l: f64,
    pub curvature: f64,
    pub theta_reg: f64,
    pub box_half_width: f64,
    pub outer: OuterKind,
}

impl Default for QuadraticDims {
    fn default() -> Self {
        Self {
            d: 3,
            p: 2,
            m: 1,
            instances: 5,
            mu: 1.0,
            l: 4.0,
            curvature: 1.0,
            theta_reg: 0.5,
            box_half_width: 100.0,
            outer: OuterKind::Log,
        }
    }
}

/// A quadratic problem together with its closed-form oracles.
#[derive(Debug, Clone)]
pub struct QuadraticCbo {
    pub problem: CboProblem,
    instances: Vec<Arc<QuadraticInstance>>,
    outer: OuterKind,
}

impl QuadraticCbo {
    pub fn from_instances(instances: Vec<QuadraticInstance>, outer: OuterKind) -> Result<Self> {
        let instances: Vec<Arc<QuadraticInstance>> = instances.into_iter().map(Arc::new).collect();
        let m = instances
            .first()
            .ok_or_else(|| CboError::InvalidArgument("no instances".into()))?
            .dims()
            .m;
        let dyn_instances: Vec<Arc<dyn ProblemInstance>> =
            instances.iter().map(|i| i.clone() as Arc<dyn ProblemInstance>).collect();
        let mut problem = CboProblem::new(dyn_instances, outer.build(m), InstanceLink::Identity)?;
        let mu = instances.iter().map(|i| i.bounds.mu).fold(f64::INFINITY, f64::min);
        problem.constants = ProblemConstants {
            mu: Some(mu),
            lipschitz_h: Some(instances.iter().map(|i| i.bounds.l).fold(0.0, f64::max)),
            ..ProblemConstants::default()
        };
        Ok(Self {
            problem,
            instances,
            outer,
        })
    }

    pub fn instance(&self, i: usize) -> &QuadraticInstance {
        &self.instances[i]
    }

    pub fn outer_kind(&self) -> OuterKind {
        self.outer
    }

    /// Smallest μ and largest L over the instances.
    pub fn curvature_range(&self) -> CurvatureBounds {
        CurvatureBounds {
            mu: self.instances.iter().map(|i| i.bounds.mu).fold(f64::INFINITY, f64::min),
            l: self.instances.iter().map(|i| i.bounds.l).fold(0.0, f64::max),
        }
    }

    pub fn delta_star(&self, i: usize, theta: &Vector) -> Vector {
        self.instances[i].delta_star(theta)
    }

    /// `ḡ(θ) = (1/M) Σ g_i(θ, δ*_i(θ))`.
    pub fn composed_mean(&self, theta: &Vector) -> Vector {
        let mut mean = Vector::zeros(self.problem.dims().m);
        for inst in &self.instances {
            mean += inst.g_value(theta, &inst.delta_star(theta));
        }
        mean / self.instances.len() as f64
    }

    pub fn objective(&self, theta: &Vector) -> f64 {
        self.problem.outer().evaluate(&self.composed_mean(theta))
    }

    /// Analytic `∇F(θ)`.
    pub fn gradient(&self, theta: &Vector) -> Vector {
        let (d, m) = (self.problem.dims().d, self.problem.dims().m);
        let mut jac = Matrix::zeros(d, m);
        for inst in &self.instances {
            jac += inst.composed_jacobian(theta);
        }
        jac /= self.instances.len() as f64;
        jac * self.problem.outer().gradient(&self.composed_mean(theta))
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * { let z: f64 = StandardNormal.sample(rng); z })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| scale * { let z: f64 = StandardNormal.sample(rng); z })
}

/// Random SPD matrix whose spectrum spans exactly `[mu, l]`.
fn spd_with_spectrum(rng: &mut ChaCha8Rng, p: usize, mu: f64, l: f64) -> Matrix {
    let basis = gaussian_matrix(rng, p, p, 1.0).qr().q();
    let spread = Uniform::new_inclusive(mu, l).expect("valid spectrum range");
    let eig = Vector::from_fn(p, |k, _| match k {
        0 => mu,
        _ if k == p - 1 => l,
        _ => spread.sample(rng),
    });
    let dense = &basis * Matrix::from_diagonal(&eig) * basis.transpose();
    0.5 * (&dense + dense.transpose())
}

/// Offset making every coordinate of `g ≥ 1` over the whole box.
fn safe_offset(linear: &Matrix, anchor: &Vector, curvature: f64, half_width: f64) -> Vector {
    Vector::from_fn(linear.nrows(), |j, _| {
        let q = linear.row(j).transpose();
        let lowest = if curvature > 0.0 {
            q.dot(anchor) - q.norm_squared() / (2.0 * curvature)
        } else {
            -q.iter().map(|x| x.abs()).sum::<f64>() * half_width
        };
        1.0 + (-lowest).max(0.0)
    })
}

/// Random quadratic CBO with its analytic oracles, deterministic in `seed`.
pub fn make_quadratic_cbo(seed: u64, dims: QuadraticDims) -> Result<QuadraticCbo> {
    if dims.d == 0 || dims.p == 0 || dims.m == 0 || dims.instances == 0 {
        return Err(CboError::InvalidArgument("quadratic dims must be positive".into()));
    }
    if !(dims.mu > 0.0) || dims.l < dims.mu {
        return Err(CboError::InvalidArgument(format!(
            "need 0 < μ ≤ L, got μ = {}, L = {}",
            dims.mu, dims.l
        )));
    }
    if dims.curvature < 0.0 || dims.theta_reg < 0.0 {
        return Err(CboError::InvalidArgument("curvature and theta_reg must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..dims.instances)
        .map(|_| {
            let shift = gaussian_matrix(&mut rng, dims.p, dims.d, 1.0 / (dims.d as f64).sqrt());
            let center = gaussian_vector(&mut rng, dims.p, 0.5);
            let hessian = spd_with_spectrum(&mut rng, dims.p, dims.mu, dims.l);
            let linear = gaussian_matrix(&mut rng, dims.m, dims.p, 1.0);
            let anchor = gaussian_vector(&mut rng, dims.p, 1.0);
            let offset = safe_offset(&linear, &anchor, dims.curvature, dims.box_half_width);
            QuadraticInstance::new(QuadraticInstanceSpec {
                shift,
                center,
                hessian,
                linear,
                anchor,
                curvature: dims.curvature,
                theta_reg: dims.theta_reg,
                offset,
                box_half_width: dims.box_half_width,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuadraticCbo::from_instances(instances, dims.outer)
}
