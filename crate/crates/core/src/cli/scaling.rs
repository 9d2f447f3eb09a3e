//! Grids of CID runs on the quadratic family, scored by the true gradient norm.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::format_float;
use crate::cid::{run_observed, SolverConfig};
use crate::error::Result;
use crate::problem::Vector;
use crate::testbed::quadratic::{make_quadratic_cbo, QuadraticDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCell {
    pub t: usize,
    pub k: usize,
    pub seed: u64,
    /// Mean of `‖∇F(θ_t)‖²` over `t = 0 … T−1`.
    pub mean_sq_grad_norm: f64,
    /// Same mean over the last quarter of the run.
    pub tail_sq_grad_norm: f64,
    /// `‖∇F(θ_T)‖²`.
    pub final_sq_grad_norm: f64,
    /// Set when the run failed; the numeric columns are then NaN.
    pub error: Option<String>,
}

/// One quadratic problem per seed; the solver seed follows the problem seed.
pub fn run_cell(base: &SolverConfig, dims: QuadraticDims, t: usize, k: usize, seed: u64) -> ScalingCell {
    let mut cell = ScalingCell {
        t,
        k,
        seed,
        mean_sq_grad_norm: f64::NAN,
        tail_sq_grad_norm: f64::NAN,
        final_sq_grad_norm: f64::NAN,
        error: None,
    };
    let outcome = (|| -> Result<(Vec<f64>, f64)> {
        let qc = make_quadratic_cbo(seed, dims)?;
        let config = SolverConfig {
            outer_steps: t,
            inner_steps: k,
            seed,
            ..base.clone()
        };
        let mut norms = Vec::with_capacity(t);
        let (state, _) = run_observed(&qc.problem, &config, Vector::zeros(dims.d), |s| {
            norms.push(qc.gradient(&s.theta).norm_squared());
        })?;
        Ok((norms, qc.gradient(&state.theta).norm_squared()))
    })();
    match outcome {
        Ok((norms, last)) => {
            let tail = &norms[norms.len() - (norms.len() / 4).max(1)..];
            cell.mean_sq_grad_norm = norms.iter().sum::<f64>() / norms.len() as f64;
            cell.tail_sq_grad_norm = tail.iter().sum::<f64>() / tail.len() as f64;
            cell.final_sq_grad_norm = last;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Every `(T, K, seed)` combination; failed cells are reported, not fatal.
pub fn scaling_study(
    base: &SolverConfig,
    dims: QuadraticDims,
    t_list: &[usize],
    k_list: &[usize],
    seeds: &[u64],
) -> Vec<ScalingCell> {
    let grid: Vec<(usize, usize, u64)> = t_list
        .iter()
        .flat_map(|&t| k_list.iter().flat_map(move |&k| seeds.iter().map(move |&s| (t, k, s))))
        .collect();
    grid.par_iter().map(|&(t, k, s)| run_cell(base, dims, t, k, s)).collect()
}

pub const SCALING_HEADER: &str = "T,K,seed,mean_sq_grad_norm,tail_sq_grad_norm,final_sq_grad_norm,error";

pub fn scaling_csv(cells: &[ScalingCell]) -> String {
    let mut out = String::from(SCALING_HEADER);
    out.push('\n');
    for c in cells {
        let error = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.t,
            c.k,
            c.seed,
            format_float(c.mean_sq_grad_norm),
            format_float(c.tail_sq_grad_norm),
            format_float(c.final_sq_grad_norm),
            error
        ));
    }
    out
}
