//! Convex-optimization toolbox: log-sum-exp minimization, smoothed minimax,
//! KL projection onto a hull of probability vectors, a dense log-barrier
//! method and a revised simplex LP solver.

mod barrier;
mod kl;
mod lp;
mod lse;

pub use barrier::{BarrierSolution, Constraint, ConvexProgram, LseTerm};
pub use kl::{kl_divergence, kl_project, kl_project_from, KlProjection};
pub use lp::{solve_lp, LinearProgram, LpResult, LpSolution, LpStatus, Relation, VarId};
pub use lse::{
    lse_value, minimize_lse, minimize_max_lse, LseOutcome, LseSolution, MinimaxOutcome, MinimaxSolution, Piece,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerical settings shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub mu_schedule: Vec<f64>,
    pub backtrack: f64,
    pub armijo: f64,
    pub lp_pivot_tol: f64,
    /// Target bound on the barrier duality gap.
    pub barrier_gap: f64,
    /// Relative objective change that stops the KL projection.
    pub kl_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 500,
            mu_schedule: vec![1.0, 10.0, 100.0, 1000.0, 10000.0],
            backtrack: 0.5,
            armijo: 1e-4,
            lp_pivot_tol: 1e-10,
            barrier_gap: 1e-10,
            kl_tol: 1e-11,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grad_tol", self.grad_tol),
            ("backtrack", self.backtrack),
            ("armijo", self.armijo),
            ("lp_pivot_tol", self.lp_pivot_tol),
            ("barrier_gap", self.barrier_gap),
            ("kl_tol", self.kl_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.backtrack >= 1.0 {
            return Err(Error::InvalidArgument("backtrack factor must be < 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        if self.mu_schedule.is_empty() {
            return Err(Error::InvalidArgument("smoothing schedule is empty".into()));
        }
        if self.mu_schedule.iter().any(|&m| !(m > 0.0)) || self.mu_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("smoothing schedule must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}
