//! Compositional bilevel optimization (CBO) toolkit.
//!
//! The crate solves problems of the form
//!
//! ```text
//! min_θ  f( (1/M) Σ_i g_i(θ, δ*_i(θ)) )    with   δ*_i(θ) = argmin_{δ ∈ C_i} h_i(θ, δ)
//! ```
//!
//! using implicit hypergradients and a running estimate of the composed inner value
//! (the CID iteration in [`cid`]). The KL-regularized instance reweighting used for
//! robust adversarial training lives in [`dro`]; the log-barrier reformulation of
//! box-constrained inner problems lives in [`barrier`]. Concrete problems (quadratic
//! oracles and a small adversarial-training setup) are in [`testbed`].

pub mod barrier;
pub mod cid;
pub mod cli;
pub mod dro;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod problem;
pub mod testbed;

pub use error::{CboError, Result};
pub use problem::{Matrix, Vector};
