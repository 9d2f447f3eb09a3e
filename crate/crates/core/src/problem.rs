//! The compositional bilevel problem and the oracle interface its instances provide.
//!
//! A problem is `F(θ) = f(ḡ(θ))` with `ḡ(θ) = (1/M) Σ_i link(g_i(θ, δ*_i(θ)))` and
//! `δ*_i(θ)` the minimizer of `h_i(θ, ·)` over a box. Instances expose explicit value,
//! gradient and second-order product oracles; nothing is differentiated automatically.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{BoxSide, CboError, Result};
use crate::linalg::relative_error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Minimum margin an iterate must keep from every face to count as strictly feasible.
pub const STRICT_MARGIN: f64 = 1e-12;

/// ℓ∞-type box `{δ : Aδ ≤ b}` with `A = (I, −I)ᵀ`.
///
/// `b` has length `2p`: entries `0..p` bound `δ_k` from above, entries `p..2p` bound
/// `−δ_k` from above. The matrix `A` is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    b: Vector,
    interior_point: Vector,
}

impl BoxConstraint {
    /// Builds a box from its `2p` half-widths. Every width must be strictly positive.
    pub fn from_widths(b: Vector) -> Result<Self> {
        if b.len() % 2 != 0 || b.is_empty() {
            return Err(CboError::DimensionMismatch(format!(
                "box widths must have even positive length, got {}",
                b.len()
            )));
        }
        let p = b.len() / 2;
        for k in 0..p {
            if !(b[k] > 0.0) {
                return Err(CboError::DegenerateBox {
                    index: k,
                    side: BoxSide::Upper,
                });
            }
            if !(b[p + k] > 0.0) {
                return Err(CboError::DegenerateBox {
                    index: k,
                    side: BoxSide::Lower,
                });
            }
        }
        let interior_point = Vector::from_fn(p, |k, _| 0.5 * (b[k] - b[p + k]));
        Ok(Self { b, interior_point })
    }

    /// Symmetric box `[-w, w]^p`.
    pub fn symmetric(p: usize, half_width: f64) -> Result<Self> {
        Self::from_widths(Vector::from_element(2 * p, half_width))
    }

    pub fn dim(&self) -> usize {
        self.interior_point.len()
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// The strictly feasible box center.
    pub fn interior_point(&self) -> &Vector {
        &self.interior_point
    }

    /// Dense `(2p × p)` constraint matrix `(I, −I)ᵀ`.
    pub fn a_matrix(&self) -> Matrix {
        let p = self.dim();
        Matrix::from_fn(2 * p, p, |row, col| {
            if row == col {
                1.0
            } else if row == col + p {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn upper(&self, k: usize) -> f64 {
        self.b[k]
    }

    pub fn lower(&self, k: usize) -> f64 {
        -self.b[self.dim() + k]
    }

    /// Residuals `b − Aδ`, one per face.
    pub fn margins(&self, delta: &Vector) -> Vector {
        let p = self.dim();
        Vector::from_fn(2 * p, |k, _| {
            if k < p {
                self.b[k] - delta[k]
            } else {
                self.b[k] + delta[k - p]
            }
        })
    }

    pub fn min_margin(&self, delta: &Vector) -> f64 {
        self.margins(delta).min()
    }

    pub fn is_strictly_feasible(&self, delta: &Vector) -> bool {
        delta.len() == self.dim() && self.min_margin(delta) > 0.0
    }

    /// Euclidean projection: a coordinatewise clamp.
    pub fn project(&self, delta: &Vector) -> Vector {
        Vector::from_fn(self.dim(), |k, _| delta[k].clamp(self.lower(k), self.upper(k)))
    }
}

/// Encodes the attack set `{δ : ‖δ‖∞ ≤ ε, x + δ ∈ [0,1]^p}` as a box.
pub fn build_box_constraints(x: &Vector, epsilon: f64) -> Result<BoxConstraint> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CboError::InvalidArgument(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if let Some(k) = x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(CboError::InvalidArgument(format!(
            "input coordinate {k} = {} lies outside [0, 1]",
            x[k]
        )));
    }
    let p = x.len();
    let b = Vector::from_fn(2 * p, |k, _| {
        if k < p {
            epsilon.min(1.0 - x[k])
        } else {
            epsilon.min(x[k - p])
        }
    });
    BoxConstraint::from_widths(b)
}

/// The outer function `f : R^m → R`.
pub trait OuterScalarFn: Send + Sync + fmt::Debug {
    fn evaluate(&self, z: &Vector) -> f64;
    fn gradient(&self, z: &Vector) -> Vector;
    /// Smallest admissible input coordinate.
    fn domain_floor(&self) -> f64;
    /// `Some(s)` when `f(z) = s · Σ_j log z_j`; enables log-domain evaluation paths.
    fn log_scale(&self) -> Option<f64> {
        None
    }
}

/// `f(z) = wᵀz`.
#[derive(Debug, Clone)]
pub struct LinearOuter {
    pub weights: Vector,
}

impl LinearOuter {
    pub fn new(weights: Vector) -> Self {
        Self { weights }
    }
}

impl OuterScalarFn for LinearOuter {
    fn evaluate(&self, z: &Vector) -> f64 {
        self.weights.dot(z)
    }

    fn gradient(&self, _z: &Vector) -> Vector {
        self.weights.clone()
    }

    fn domain_floor(&self) -> f64 {
        f64::NEG_INFINITY
    }
}

/// `f(z) = s · Σ_j log z_j`, restricted to `z_j ≥ floor`.
#[derive(Debug, Clone)]
pub struct LogOuter {
    pub scale: f64,
    pub floor: f64,
}

impl LogOuter {
    pub fn new(scale: f64, floor: f64) -> Self {
        Self { scale, floor }
    }
}

impl OuterScalarFn for LogOuter {
    fn evaluate(&self, z: &Vector) -> f64 {
        self.scale * z.iter().map(|v| v.ln()).sum::<f64>()
    }

    fn gradient(&self, z: &Vector) -> Vector {
        z.map(|v| self.scale / v)
    }

    fn domain_floor(&self) -> f64 {
        self.floor
    }

    fn log_scale(&self) -> Option<f64> {
        Some(self.scale)
    }
}

/// Elementwise map applied to each instance's raw `g` before averaging.
///
/// The reweighted adversarial objective uses `exp(ℓ/r)`; keeping the exponential here
/// rather than inside the instances lets the temperature change without rebuilding
/// them and lets callers work with the raw losses in shifted (overflow-free) form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InstanceLink {
    Identity,
    Exp { r: f64 },
}

impl InstanceLink {
    pub fn apply(&self, raw: &Vector) -> Vector {
        match *self {
            InstanceLink::Identity => raw.clone(),
            InstanceLink::Exp { r } => raw.map(|v| (v / r).exp()),
        }
    }

    /// Elementwise derivative of the link at `raw`.
    pub fn derivative(&self, raw: &Vector) -> Vector {
        match *self {
            InstanceLink::Identity => Vector::from_element(raw.len(), 1.0),
            InstanceLink::Exp { r } => raw.map(|v| (v / r).exp() / r),
        }
    }
}

/// Declared curvature constants of an inner objective over its box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureBounds {
    /// Strong convexity modulus μ.
    pub mu: f64,
    /// Gradient Lipschitz constant L ≥ μ.
    pub l: f64,
}

impl CurvatureBounds {
    /// The stepsize `2/(L+μ)`, which makes projected gradient descent a contraction
    /// with factor `(L−μ)/(L+μ)`.
    pub fn optimal_step(&self) -> f64 {
        2.0 / (self.l + self.mu)
    }

    pub fn contraction_factor(&self) -> f64 {
        (self.l - self.mu) / (self.l + self.mu)
    }
}

/// Dimensions `(d, p, m)` of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceDims {
    pub d: usize,
    pub p: usize,
    pub m: usize,
}

/// One `(g_i, h_i)` pair with its oracles.
///
/// Jacobians follow the `(input × output)` layout: `g_jac_theta` is `d × m` and
/// `g_jac_delta` is `p × m`, so `g_jac_theta(θ, δ) · ∇f(u)` is a `d`-vector.
pub trait ProblemInstance: Send + Sync {
    fn dims(&self) -> InstanceDims;
    fn g_value(&self, theta: &Vector, delta: &Vector) -> Vector;
    fn g_jac_theta(&self, theta: &Vector, delta: &Vector) -> Matrix;
    fn g_jac_delta(&self, theta: &Vector, delta: &Vector) -> Matrix;
    fn h_value(&self, theta: &Vector, delta: &Vector) -> f64;
    fn h_grad_delta(&self, theta: &Vector, delta: &Vector) -> Vector;
    /// `∇²_δ h(θ, δ) · v`.
    fn h_hess_delta_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector;
    /// `∇_θ∇_δ h(θ, δ) · v = ∂/∂θ [∇_δ h(θ, δ)ᵀ v]`.
    fn h_cross_jac_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector;
    fn constraint(&self) -> &BoxConstraint;
    /// Strong convexity and smoothness of `h(θ, ·)` when known.
    fn curvature_bounds(&self) -> Option<CurvatureBounds> {
        None
    }
}

/// Problem-level constants, recorded for reference; the solver reads only μ and L.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProblemConstants {
    pub lipschitz_f: Option<f64>,
    pub lipschitz_g: Option<f64>,
    pub lipschitz_h: Option<f64>,
    pub bound_grad_f: Option<f64>,
    pub bound_grad_g: Option<f64>,
    pub mu: Option<f64>,
    pub variance_g: Option<f64>,
}

/// Dimensions `(d, p, m, M)` of a whole problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemDims {
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub instances: usize,
}

#[derive(Clone)]
pub struct CboProblem {
    instances: Vec<Arc<dyn ProblemInstance>>,
    outer: Arc<dyn OuterScalarFn>,
    link: InstanceLink,
    dims: ProblemDims,
    pub constants: ProblemConstants,
}

impl fmt::Debug for CboProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CboProblem")
            .field("dims", &self.dims)
            .field("outer", &self.outer)
            .field("link", &self.link)
            .finish()
    }
}

impl CboProblem {
    pub fn new(
        instances: Vec<Arc<dyn ProblemInstance>>,
        outer: Arc<dyn OuterScalarFn>,
        link: InstanceLink,
    ) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| CboError::InvalidArgument("a problem needs at least one instance".into()))?
            .dims();
        for (i, inst) in instances.iter().enumerate() {
            if inst.dims() != first {
                return Err(CboError::DimensionMismatch(format!(
                    "instance {i} has dims {:?}, expected {:?}",
                    inst.dims(),
                    first
                )));
            }
            if inst.constraint().dim() != first.p {
                return Err(CboError::DimensionMismatch(format!(
                    "instance {i} constraint has dimension {}, expected {}",
                    inst.constraint().dim(),
                    first.p
                )));
            }
        }
        if let InstanceLink::Exp { r } = link {
            if !(r > 0.0) {
                return Err(CboError::InvalidArgument(format!("link temperature must be positive, got {r}")));
            }
        }
        let dims = ProblemDims {
            d: first.d,
            p: first.p,
            m: first.m,
            instances: instances.len(),
        };
        Ok(Self {
            instances,
            outer,
            link,
            dims,
            constants: ProblemConstants::default(),
        })
    }

    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, index: usize) -> &dyn ProblemInstance {
        self.instances[index].as_ref()
    }

    pub fn instances(&self) -> &[Arc<dyn ProblemInstance>] {
        &self.instances
    }

    pub fn outer(&self) -> &dyn OuterScalarFn {
        self.outer.as_ref()
    }

    pub fn link(&self) -> InstanceLink {
        self.link
    }

    /// Same instances, different outer function and link.
    pub fn with_outer(&self, outer: Arc<dyn OuterScalarFn>, link: InstanceLink) -> Result<Self> {
        let mut next = Self::new(self.instances.clone(), outer, link)?;
        next.constants = self.constants;
        Ok(next)
    }

    /// Same outer function and link over different instances.
    pub fn with_instances(&self, instances: Vec<Arc<dyn ProblemInstance>>) -> Result<Self> {
        Self::new(instances, self.outer.clone(), self.link)
    }

    /// `link(g_i(θ, δ))`.
    pub fn linked_g(&self, index: usize, theta: &Vector, delta: &Vector) -> Vector {
        self.link.apply(&self.instance(index).g_value(theta, delta))
    }
}

/// A problem whose outer temperature can change during a run.
pub trait ProblemSchedule {
    /// The problem to optimize when the temperature is `r`.
    fn problem_at(&self, r: f64) -> Result<CboProblem>;
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference_gradient<F>(func: F, point: &Vector, step: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(step > 0.0) {
        return Err(CboError::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = point.clone();
    let mut grad = Vector::zeros(point.len());
    for k in 0..point.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let plus = func(&probe);
        probe[k] = orig - step;
        let minus = func(&probe);
        probe[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CboError::NonFinite {
                context: "finite-difference evaluation",
            });
        }
        grad[k] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst relative errors of each oracle of an instance against finite differences.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct OracleAudit {
    pub g_jac_theta: f64,
    pub g_jac_delta: f64,
    pub h_grad_delta: f64,
    pub h_hess_delta_vec: f64,
    pub h_cross_jac_vec: f64,
}

impl OracleAudit {
    pub fn worst(&self) -> f64 {
        [
            self.g_jac_theta,
            self.g_jac_delta,
            self.h_grad_delta,
            self.h_hess_delta_vec,
            self.h_cross_jac_vec,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn merge(&mut self, other: &OracleAudit) {
        self.g_jac_theta = self.g_jac_theta.max(other.g_jac_theta);
        self.g_jac_delta = self.g_jac_delta.max(other.g_jac_delta);
        self.h_grad_delta = self.h_grad_delta.max(other.h_grad_delta);
        self.h_hess_delta_vec = self.h_hess_delta_vec.max(other.h_hess_delta_vec);
        self.h_cross_jac_vec = self.h_cross_jac_vec.max(other.h_cross_jac_vec);
    }
}

/// Error of `analytic` against `reference`: relative, except that an absolute error
/// at or below `abs_floor` counts as exact (gradients that vanish).
pub fn gradient_error(analytic: &Vector, reference: &Vector, abs_floor: f64) -> f64 {
    let abs = (analytic - reference).norm();
    if abs <= abs_floor {
        0.0
    } else {
        relative_error(analytic, reference)
    }
}

/// Compares every oracle of `inst` with central differences at one point `(θ, δ)`.
///
/// Second-order oracles are checked as directional derivatives along `v`.
pub fn audit_instance_at(
    inst: &dyn ProblemInstance,
    theta: &Vector,
    delta: &Vector,
    v: &Vector,
    step: f64,
    abs_floor: f64,
) -> Result<OracleAudit> {
    let dims = inst.dims();
    let mut audit = OracleAudit::default();

    let jt = inst.g_jac_theta(theta, delta);
    let jd = inst.g_jac_delta(theta, delta);
    for j in 0..dims.m {
        let fd_t = finite_difference_gradient(|t| inst.g_value(t, delta)[j], theta, step)?;
        audit.g_jac_theta = audit
            .g_jac_theta
            .max(gradient_error(&jt.column(j).into_owned(), &fd_t, abs_floor));
        let fd_d = finite_difference_gradient(|x| inst.g_value(theta, x)[j], delta, step)?;
        audit.g_jac_delta = audit
            .g_jac_delta
            .max(gradient_error(&jd.column(j).into_owned(), &fd_d, abs_floor));
    }

    let grad = inst.h_grad_delta(theta, delta);
    let fd_h = finite_difference_gradient(|x| inst.h_value(theta, x), delta, step)?;
    audit.h_grad_delta = gradient_error(&grad, &fd_h, abs_floor);

    // H v ≈ ∇_δ (∇_δ h · v) and ∇_θ∇_δ h · v ≈ ∇_θ (∇_δ h · v)
    let hv = inst.h_hess_delta_vec(theta, delta, v);
    let fd_hv = finite_difference_gradient(|x| inst.h_grad_delta(theta, x).dot(v), delta, step)?;
    audit.h_hess_delta_vec = gradient_error(&hv, &fd_hv, abs_floor);

    let cross = inst.h_cross_jac_vec(theta, delta, v);
    let fd_cross = finite_difference_gradient(|t| inst.h_grad_delta(t, delta).dot(v), theta, step)?;
    audit.h_cross_jac_vec = gradient_error(&cross, &fd_cross, abs_floor);

    Ok(audit)
}

/// Audits an instance at `points` random `(θ, δ, v)` triples, with `δ` drawn strictly
/// inside the box and `θ` from `theta_sampler`.
pub fn audit_instance<R, S>(
    inst: &dyn ProblemInstance,
    points: usize,
    rng: &mut R,
    mut theta_sampler: S,
) -> Result<OracleAudit>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Vector,
{
    let dims = inst.dims();
    let mut worst = OracleAudit::default();
    for _ in 0..points {
        let theta = theta_sampler(rng);
        let delta = sample_interior(inst.constraint(), 0.9, rng);
        let v = Vector::from_fn(dims.p, |_, _| rng.random_range(-1.0..1.0));
        let audit = audit_instance_at(inst, &theta, &delta, &v, 1e-6, 1e-7)?;
        worst.merge(&audit);
    }
    Ok(worst)
}

/// Uniform sample from the box shrunk by `shrink ∈ (0, 1)` around its center.
pub fn sample_interior<R: Rng + ?Sized>(constraint: &BoxConstraint, shrink: f64, rng: &mut R) -> Vector {
    let center = constraint.interior_point();
    Vector::from_fn(constraint.dim(), |k, _| {
        let half = 0.5 * (constraint.upper(k) - constraint.lower(k)) * shrink;
        center[k] + rng.random_range(-half..=half)
    })
}

/// Smallest slack of the strong convexity inequality
/// `h(δ′) − h(δ) − ∇h(δ)ᵀ(δ′−δ) − (μ/2)‖δ′−δ‖²` over random feasible pairs.
pub fn strong_convexity_slack<R: Rng + ?Sized>(
    inst: &dyn ProblemInstance,
    theta: &Vector,
    mu: f64,
    pairs: usize,
    rng: &mut R,
) -> f64 {
    let c = inst.constraint();
    (0..pairs)
        .map(|_| {
            let a = sample_interior(c, 0.99, rng);
            let b = sample_interior(c, 0.99, rng);
            let diff = &b - &a;
            inst.h_value(theta, &b)
                - inst.h_value(theta, &a)
                - inst.h_grad_delta(theta, &a).dot(&diff)
                - 0.5 * mu * diff.norm_squared()
        })
        .fold(f64::INFINITY, f64::min)
}
