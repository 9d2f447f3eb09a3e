//! Small classifiers with hand-written first and second order derivatives.
//!
//! Parameters are a flat vector. Softmax regression stores `W (C × p)` row-major then
//! `b (C)`; the ReLU MLP stores `W1 (H × p)`, `b1 (H)`, `W2 (C × H)`, `b2 (C)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::problem::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxRegression,
    ReluMlp { hidden: usize },
}

/// A scalar function of the logits and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitLoss {
    /// `log Σ exp(z) − z_y`.
    CrossEntropy,
    /// `−(log Σ exp(z) − z_y)`.
    NegCrossEntropy,
    /// `z_y − log Σ_{j≠y} exp(z_j)`: small when some other class wins.
    SmoothMargin,
}

fn softmax(z: &Vector) -> Vector {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn log_sum_exp(z: &Vector) -> f64 {
    let max = z.max();
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over every class except `y` (zero at `y`).
fn softmax_without(z: &Vector, y: usize) -> Vector {
    let max = z.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let e = Vector::from_fn(z.len(), |j, _| if j == y { 0.0 } else { (z[j] - max).exp() });
    let s = e.sum();
    e / s
}

impl LogitLoss {
    pub fn value(&self, z: &Vector, y: usize) -> f64 {
        match self {
            LogitLoss::CrossEntropy => log_sum_exp(z) - z[y],
            LogitLoss::NegCrossEntropy => z[y] - log_sum_exp(z),
            LogitLoss::SmoothMargin => {
                let others = Vector::from_iterator(
                    z.len() - 1,
                    z.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v),
                );
                z[y] - log_sum_exp(&others)
            }
        }
    }

    /// `∂φ/∂z`.
    pub fn gradient(&self, z: &Vector, y: usize) -> Vector {
        match self {
            LogitLoss::CrossEntropy => {
                let mut s = softmax(z);
                s[y] -= 1.0;
                s
            }
            LogitLoss::NegCrossEntropy => -LogitLoss::CrossEntropy.gradient(z, y),
            LogitLoss::SmoothMargin => {
                let mut g = -softmax_without(z, y);
                g[y] += 1.0;
                g
            }
        }
    }

    /// `∂²φ/∂z² · w`.
    pub fn hessian_vec(&self, z: &Vector, y: usize, w: &Vector) -> Vector {
        let softmax_curvature = |s: &Vector| s.component_mul(w) - s * s.dot(w);
        match self {
            LogitLoss::CrossEntropy => softmax_curvature(&softmax(z)),
            LogitLoss::NegCrossEntropy => -softmax_curvature(&softmax(z)),
            LogitLoss::SmoothMargin => -softmax_curvature(&softmax_without(z, y)),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vector,
    hidden_pre: Option<Vector>,
    hidden: Option<Vector>,
}

impl Forward {
    fn mask(&self) -> Option<Vector> {
        self.hidden_pre.as_ref().map(|a| a.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub kind: ModelKind,
    pub inputs: usize,
    pub classes: usize,
}

struct Views {
    w1: Matrix,
    b1: Vector,
    w2: Option<Matrix>,
    b2: Option<Vector>,
}

impl ToyClassifier {
    pub fn new(kind: ModelKind, inputs: usize, classes: usize) -> Self {
        Self { kind, inputs, classes }
    }

    pub fn num_params(&self) -> usize {
        let (p, c) = (self.inputs, self.classes);
        match self.kind {
            ModelKind::SoftmaxRegression => c * p + c,
            ModelKind::ReluMlp { hidden } => hidden * p + hidden + c * hidden + c,
        }
    }

    /// He-style Gaussian initialization with zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let mut theta = Vector::zeros(self.num_params());
        let (p, c) = (self.inputs, self.classes);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut R| {
            let scale = (2.0 / fan_in as f64).sqrt();
            for k in range {
                let z: f64 = StandardNormal.sample(rng);
                theta[k] = scale * z;
            }
        };
        match self.kind {
            ModelKind::SoftmaxRegression => fill(0..c * p, p, rng),
            ModelKind::ReluMlp { hidden } => {
                fill(0..hidden * p, p, rng);
                let w2 = hidden * p + hidden;
                fill(w2..w2 + c * hidden, hidden, rng);
            }
        }
        theta
    }

    fn views(&self, theta: &Vector) -> Views {
        let (p, c) = (self.inputs, self.classes);
        let s = theta.as_slice();
        match self.kind {
            ModelKind::SoftmaxRegression => Views {
                w1: Matrix::from_row_slice(c, p, &s[..c * p]),
                b1: Vector::from_column_slice(&s[c * p..c * p + c]),
                w2: None,
                b2: None,
            },
            ModelKind::ReluMlp { hidden } => {
                let o1 = hidden * p;
                let o2 = o1 + hidden;
                let o3 = o2 + c * hidden;
                Views {
                    w1: Matrix::from_row_slice(hidden, p, &s[..o1]),
                    b1: Vector::from_column_slice(&s[o1..o2]),
                    w2: Some(Matrix::from_row_slice(c, hidden, &s[o2..o3])),
                    b2: Some(Vector::from_column_slice(&s[o3..o3 + c])),
                }
            }
        }
    }

    pub fn forward(&self, theta: &Vector, x: &Vector) -> Forward {
        let v = self.views(theta);
        let pre = &v.w1 * x + &v.b1;
        match (v.w2, v.b2) {
            (Some(w2), Some(b2)) => {
                let hidden = pre.map(|a| a.max(0.0));
                Forward {
                    logits: w2 * &hidden + b2,
                    hidden_pre: Some(pre),
                    hidden: Some(hidden),
                }
            }
            _ => Forward {
                logits: pre,
                hidden_pre: None,
                hidden: None,
            },
        }
    }

    pub fn logits(&self, theta: &Vector, x: &Vector) -> Vector {
        self.forward(theta, x).logits
    }

    pub fn predict(&self, theta: &Vector, x: &Vector) -> usize {
        self.logits(theta, x).argmax().0
    }

    pub fn loss(&self, theta: &Vector, x: &Vector, y: usize, loss: LogitLoss) -> f64 {
        loss.value(&self.logits(theta, x), y)
    }

    /// Pulls a logit cotangent `dz` back to the parameters.
    fn backprop_theta(&self, theta: &Vector, x: &Vector, fwd: &Forward, dz: &Vector) -> Vector {
        let v = self.views(theta);
        let mut out = Vec::with_capacity(self.num_params());
        match (&v.w2, fwd.mask(), &fwd.hidden) {
            (Some(w2), Some(mask), Some(hidden)) => {
                let da1 = (w2.transpose() * dz).component_mul(&mask);
                push_outer(&mut out, &da1, x);
                out.extend(da1.iter());
                push_outer(&mut out, dz, hidden);
                out.extend(dz.iter());
            }
            _ => {
                push_outer(&mut out, dz, x);
                out.extend(dz.iter());
            }
        }
        Vector::from_vec(out)
    }

    /// Pulls a logit cotangent back to the input.
    fn backprop_x(&self, theta: &Vector, fwd: &Forward, dz: &Vector) -> Vector {
        let v = self.views(theta);
        match (&v.w2, fwd.mask()) {
            (Some(w2), Some(mask)) => v.w1.transpose() * (w2.transpose() * dz).component_mul(&mask),
            _ => v.w1.transpose() * dz,
        }
    }

    /// Input tangent `v` pushed forward: returns `(ż, ḣ)`.
    fn tangent(&self, theta: &Vector, fwd: &Forward, dx: &Vector) -> (Vector, Option<Vector>) {
        let v = self.views(theta);
        match (&v.w2, fwd.mask()) {
            (Some(w2), Some(mask)) => {
                let dh = (&v.w1 * dx).component_mul(&mask);
                (w2 * &dh, Some(dh))
            }
            _ => (&v.w1 * dx, None),
        }
    }

    pub fn grad_theta(&self, theta: &Vector, x: &Vector, y: usize, loss: LogitLoss) -> Vector {
        let fwd = self.forward(theta, x);
        let dz = loss.gradient(&fwd.logits, y);
        self.backprop_theta(theta, x, &fwd, &dz)
    }

    pub fn grad_x(&self, theta: &Vector, x: &Vector, y: usize, loss: LogitLoss) -> Vector {
        let fwd = self.forward(theta, x);
        let dz = loss.gradient(&fwd.logits, y);
        self.backprop_x(theta, &fwd, &dz)
    }

    /// `∇²_x φ · v`. ReLU contributes no curvature away from its kinks.
    pub fn hess_x_vec(&self, theta: &Vector, x: &Vector, y: usize, loss: LogitLoss, v: &Vector) -> Vector {
        let fwd = self.forward(theta, x);
        let (dz, _) = self.tangent(theta, &fwd, v);
        let curv = loss.hessian_vec(&fwd.logits, y, &dz);
        self.backprop_x(theta, &fwd, &curv)
    }

    /// `∂/∂θ [∇_x φ(θ, x)ᵀ v]`.
    pub fn cross_vec(&self, theta: &Vector, x: &Vector, y: usize, loss: LogitLoss, v: &Vector) -> Vector {
        let fwd = self.forward(theta, x);
        let gamma = loss.gradient(&fwd.logits, y);
        let (dz, dh) = self.tangent(theta, &fwd, v);
        // through the logits
        let curv = loss.hessian_vec(&fwd.logits, y, &dz);
        let mut out = self.backprop_theta(theta, x, &fwd, &curv);
        // through the weights inside the tangent map
        let views = self.views(theta);
        let mut explicit = Vec::with_capacity(self.num_params());
        match (&views.w2, fwd.mask(), dh) {
            (Some(w2), Some(mask), Some(dh)) => {
                let back = (w2.transpose() * &gamma).component_mul(&mask);
                push_outer(&mut explicit, &back, v);
                explicit.extend(std::iter::repeat_n(0.0, back.len()));
                push_outer(&mut explicit, &gamma, &dh);
                explicit.extend(std::iter::repeat_n(0.0, gamma.len()));
            }
            _ => {
                push_outer(&mut explicit, &gamma, v);
                explicit.extend(std::iter::repeat_n(0.0, gamma.len()));
            }
        }
        out += Vector::from_vec(explicit);
        out
    }
}

/// Appends `a bᵀ` in row-major order.
fn push_outer(out: &mut Vec<f64>, a: &Vector, b: &Vector) {
    for ai in a.iter() {
        out.extend(b.iter().map(|bj| ai * bj));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use crate::problem::finite_difference_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LOSSES: [LogitLoss; 3] = [LogitLoss::CrossEntropy, LogitLoss::NegCrossEntropy, LogitLoss::SmoothMargin];

    fn models() -> Vec<ToyClassifier> {
        vec![
            ToyClassifier::new(ModelKind::SoftmaxRegression, 4, 3),
            ToyClassifier::new(ModelKind::ReluMlp { hidden: 6 }, 4, 3),
        ]
    }

    #[test]
    fn param_counts() {
        assert_eq!(ToyClassifier::new(ModelKind::SoftmaxRegression, 4, 3).num_params(), 15);
        assert_eq!(ToyClassifier::new(ModelKind::ReluMlp { hidden: 6 }, 4, 3).num_params(), 24 + 6 + 18 + 3);
    }

    #[test]
    fn logit_loss_derivatives() {
        let z = Vector::from_vec(vec![0.3, -1.2, 0.8, 0.1]);
        let w = Vector::from_vec(vec![0.5, 0.1, -0.7, 0.2]);
        for loss in LOSSES {
            for y in 0..4 {
                let fd = finite_difference_gradient(|t| loss.value(t, y), &z, 1e-6).unwrap();
                assert!(relative_error(&loss.gradient(&z, y), &fd) < 1e-7);
                let fd_h = finite_difference_gradient(|t| loss.gradient(t, y).dot(&w), &z, 1e-6).unwrap();
                assert!(relative_error(&loss.hessian_vec(&z, y, &w), &fd_h) < 1e-6);
            }
        }
    }

    #[test]
    fn manual_derivatives_pass_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for model in models() {
            for _ in 0..10 {
                let theta = model.init_params(&mut rng) + Vector::from_fn(model.num_params(), |_, _| rng.random_range(-0.1..0.1));
                let x = Vector::from_fn(model.inputs, |_, _| rng.random_range(0.1..0.9));
                let v = Vector::from_fn(model.inputs, |_, _| rng.random_range(-1.0..1.0));
                let y = rng.random_range(0..model.classes);
                for loss in LOSSES {
                    let fd_t = finite_difference_gradient(|t| model.loss(t, &x, y, loss), &theta, 1e-6).unwrap();
                    assert!(relative_error(&model.grad_theta(&theta, &x, y, loss), &fd_t) < 1e-5);
                    let fd_x = finite_difference_gradient(|t| model.loss(&theta, t, y, loss), &x, 1e-6).unwrap();
                    assert!(relative_error(&model.grad_x(&theta, &x, y, loss), &fd_x) < 1e-5);
                    let fd_hv =
                        finite_difference_gradient(|t| model.grad_x(&theta, t, y, loss).dot(&v), &x, 1e-6).unwrap();
                    let hv = model.hess_x_vec(&theta, &x, y, loss, &v);
                    assert!((&hv - &fd_hv).norm() <= 1e-7 || relative_error(&hv, &fd_hv) < 1e-5);
                    let fd_c =
                        finite_difference_gradient(|t| model.grad_x(t, &x, y, loss).dot(&v), &theta, 1e-6).unwrap();
                    assert!(relative_error(&model.cross_vec(&theta, &x, y, loss, &v), &fd_c) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_predicts_argmax() {
        let model = ToyClassifier::new(ModelKind::SoftmaxRegression, 2, 2);
        let theta = Vector::from_vec(vec![5.0, 0.0, -5.0, 0.0, 0.0, 0.0]);
        let x = Vector::from_vec(vec![0.8, 0.2]);
        assert_eq!(model.predict(&theta, &x), 0);
        assert!(model.loss(&theta, &x, 0, LogitLoss::CrossEntropy) >= 0.0);
        assert!(model.loss(&theta, &x, 1, LogitLoss::CrossEntropy) > model.loss(&theta, &x, 0, LogitLoss::CrossEntropy));
    }
}
