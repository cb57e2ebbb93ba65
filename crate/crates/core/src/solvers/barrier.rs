//! Dense log-barrier method for small convex programs whose constraints are
//! either affine or of log-sum-exp type.
//!
//! The program is
//!
//! ```text
//! minimize    c·x
//! subject to  a_j·x <= b_j                                   (affine)
//!             log Σ_k w_k exp(o_k + a_k·x) + l·x + κ <= 0     (log-sum-exp)
//! ```
//!
//! Each centering step runs damped Newton on `t·c·x − Σ log(−f_j(x))`; the
//! multipliers `1 / (t·(−f_j))` are returned alongside the minimizer so that
//! callers can read off the dual solution.

use nalgebra::{DMatrix, DVector};

use super::SolverConfig;

#[derive(Debug, Clone)]
pub struct LseTerm {
    pub weight: f64,
    pub offset: f64,
    pub coeffs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub enum Constraint {
    /// `coeffs·x <= rhs`
    Linear { coeffs: Vec<(usize, f64)>, rhs: f64 },
    /// `log Σ w exp(offset + coeffs·x) + linear·x + constant <= 0`
    LogSumExp { terms: Vec<LseTerm>, linear: Vec<(usize, f64)>, constant: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    pub n: usize,
    pub objective: Vec<(usize, f64)>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub objective: f64,
    /// Upper bound `m / t` on the gap to the true optimum.
    pub gap_bound: f64,
    pub newton_steps: usize,
    /// Set when the iterates left the region `|x_i| <= divergence_bound`.
    pub diverged: bool,
    /// Set when a centering step hit its iteration cap.
    pub stalled: bool,
}

struct Eval {
    value: f64,
    grad: Vec<(usize, f64)>,
    /// Weighted coefficient rows `(π_k, a_k)` of a log-sum-exp constraint.
    lse: Option<(Vec<f64>, Vec<Vec<(usize, f64)>>, Vec<(usize, f64)>)>,
}

fn dot(coeffs: &[(usize, f64)], x: &[f64]) -> f64 {
    coeffs.iter().map(|&(i, a)| a * x[i]).sum()
}

fn merge(mut v: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    v.sort_by_key(|p| p.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(v.len());
    for (i, a) in v {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += a,
            _ => out.push((i, a)),
        }
    }
    out
}

impl Constraint {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Linear { coeffs, rhs } => dot(coeffs, x) - rhs,
            Constraint::LogSumExp { terms, linear, constant } => log_sum_exp(terms, x) + dot(linear, x) + constant,
        }
    }

    fn eval(&self, x: &[f64]) -> Eval {
        match self {
            Constraint::Linear { coeffs, rhs } => Eval { value: dot(coeffs, x) - rhs, grad: coeffs.clone(), lse: None },
            Constraint::LogSumExp { terms, linear, constant } => {
                let exps: Vec<f64> =
                    terms
                        .iter()
                        .map(|t| {
                            if t.weight > 0.0 {
                                t.weight.ln() + t.offset + dot(&t.coeffs, x)
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect();
                let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = exps.iter().map(|e| (e - m).exp()).sum();
                let pis: Vec<f64> = exps.iter().map(|e| (e - m).exp() / s).collect();
                let mut mean = Vec::new();
                for (t, &p) in terms.iter().zip(&pis) {
                    if p > 0.0 {
                        for &(i, a) in &t.coeffs {
                            mean.push((i, p * a));
                        }
                    }
                }
                let mean = merge(mean);
                let mut grad = mean.clone();
                grad.extend_from_slice(linear);
                let grad = merge(grad);
                let rows = terms.iter().map(|t| t.coeffs.clone()).collect();
                Eval { value: m + s.ln() + dot(linear, x) + constant, grad, lse: Some((pis, rows, mean)) }
            }
        }
    }
}

/// Numerically stable `log Σ w exp(offset + coeffs·x)`.
fn log_sum_exp(terms: &[LseTerm], x: &[f64]) -> f64 {
    let exps: Vec<f64> =
        terms.iter().filter(|t| t.weight > 0.0).map(|t| t.weight.ln() + t.offset + dot(&t.coeffs, x)).collect();
    let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + exps.iter().map(|e| (e - m).exp()).sum::<f64>().ln()
}

impl ConvexProgram {
    pub fn new(n: usize) -> Self {
        Self { n, objective: Vec::new(), constraints: Vec::new() }
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        dot(&self.objective, x)
    }

    pub fn is_strictly_feasible(&self, x: &[f64]) -> bool {
        self.constraints.iter().all(|c| {
            let v = c.value(x);
            v < 0.0 && v.is_finite()
        })
    }

    /// `φ_t(y) − φ_t(x)` for the barrier `φ_t = t·c·x − Σ log(−f_j)`, computed
    /// as a sum of differences so that it stays accurate when `t` is large.
    fn barrier_change(&self, t: f64, fx: &[f64], x: &[f64], y: &[f64]) -> Option<f64> {
        let mut d = t * self.objective.iter().map(|&(i, a)| a * (y[i] - x[i])).sum::<f64>();
        for (c, &f0) in self.constraints.iter().zip(fx) {
            let v = c.value(y);
            if !(v < 0.0) || !v.is_finite() {
                return None;
            }
            d -= (v / f0).ln();
        }
        Some(d)
    }

    /// Runs the barrier method from a strictly feasible `x0`.
    ///
    /// `divergence_bound` stops the run once any coordinate exceeds it in
    /// magnitude, which is how unbounded programs are detected.
    pub fn solve(&self, x0: Vec<f64>, cfg: &SolverConfig, divergence_bound: f64) -> BarrierSolution {
        assert_eq!(x0.len(), self.n);
        assert!(self.is_strictly_feasible(&x0), "barrier start point must be strictly feasible");
        let m = self.constraints.len().max(1) as f64;
        let mut x = x0;
        let mut t = 1.0_f64;
        let growth = 10.0;
        let mut newton_steps = 0usize;
        let mut diverged = false;
        let mut stalled = false;
        let mut c_dense = vec![0.0; self.n];
        for &(i, a) in &self.objective {
            c_dense[i] += a;
        }
        loop {
            let (steps, ok) = self.center(&mut x, t, &c_dense, cfg);
            newton_steps += steps;
            if !ok {
                stalled = true;
            }
            if x.iter().any(|v| v.abs() > divergence_bound) {
                diverged = true;
                break;
            }
            if m / t < cfg.barrier_gap {
                break;
            }
            t *= growth;
            if t > 1e16 {
                break;
            }
        }
        let multipliers = self.constraints.iter().map(|c| 1.0 / (t * (-c.value(&x)))).collect();
        BarrierSolution {
            objective: self.objective_value(&x),
            x,
            multipliers,
            gap_bound: m / t,
            newton_steps,
            diverged,
            stalled,
        }
    }

    fn center(&self, x: &mut [f64], t: f64, c: &[f64], cfg: &SolverConfig) -> (usize, bool) {
        let n = self.n;
        let max_steps = cfg.max_iter.max(50);
        for step in 0..max_steps {
            let mut g: Vec<f64> = c.iter().map(|v| t * v).collect();
            let mut h = DMatrix::<f64>::zeros(n, n);
            for con in &self.constraints {
                let e = con.eval(x);
                let inv = 1.0 / (-e.value);
                for &(i, a) in &e.grad {
                    g[i] += inv * a;
                }
                let inv2 = inv * inv;
                for &(i, a) in &e.grad {
                    for &(j, b) in &e.grad {
                        h[(i, j)] += inv2 * a * b;
                    }
                }
                if let Some((pis, rows, mean)) = e.lse {
                    for (p, row) in pis.iter().zip(&rows) {
                        if *p == 0.0 {
                            continue;
                        }
                        for &(i, a) in row {
                            for &(j, b) in row {
                                h[(i, j)] += inv * p * a * b;
                            }
                        }
                    }
                    for &(i, a) in &mean {
                        for &(j, b) in &mean {
                            h[(i, j)] -= inv * a * b;
                        }
                    }
                }
            }
            let gv = DVector::from_vec(g.clone());
            let dx = match newton_direction(&h, &gv) {
                Some(d) => d,
                None => return (step, false),
            };
            let decrement = -gv.dot(&dx);
            if decrement / 2.0 <= 1e-10 {
                return (step, true);
            }
            let fx: Vec<f64> = self.constraints.iter().map(|c| c.value(x)).collect();
            let mut s = 1.0;
            let mut trial = vec![0.0; n];
            let mut accepted = false;
            for _ in 0..80 {
                for i in 0..n {
                    trial[i] = x[i] + s * dx[i];
                }
                if let Some(change) = self.barrier_change(t, &fx, x, &trial) {
                    if change <= -cfg.armijo * s * decrement {
                        accepted = true;
                        break;
                    }
                }
                s *= cfg.backtrack;
            }
            if !accepted {
                // No further progress is representable at this precision.
                return (step, decrement < 1e-6);
            }
            x.copy_from_slice(&trial);
        }
        (max_steps, false)
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut shift = 0.0;
    for _ in 0..12 {
        let mut hs = h.clone();
        if shift > 0.0 {
            for i in 0..n {
                hs[(i, i)] += shift;
            }
        }
        if let Some(ch) = hs.cholesky() {
            let d = ch.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        shift = if shift == 0.0 { scale * 1e-14 } else { shift * 100.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_program_on_box() {
        // minimize x + y over [-1, 2]^2 → -2
        let mut p = ConvexProgram::new(2);
        p.objective = vec![(0, 1.0), (1, 1.0)];
        for i in 0..2 {
            p.constraints.push(Constraint::Linear { coeffs: vec![(i, 1.0)], rhs: 2.0 });
            p.constraints.push(Constraint::Linear { coeffs: vec![(i, -1.0)], rhs: 1.0 });
        }
        let sol = p.solve(vec![0.0, 0.0], &SolverConfig::default(), 1e9);
        assert!((sol.objective + 2.0).abs() < 1e-9, "{}", sol.objective);
        assert!(!sol.diverged && !sol.stalled);
    }

    #[test]
    fn epigraph_of_log_sum_exp() {
        // minimize z s.t. log(0.75 e^h + 0.25 e^-h) <= z  → z* = log(2·sqrt(3/16))
        let mut p = ConvexProgram::new(2);
        p.objective = vec![(1, 1.0)];
        p.constraints.push(Constraint::LogSumExp {
            terms: vec![
                LseTerm { weight: 0.75, offset: 0.0, coeffs: vec![(0, 1.0)] },
                LseTerm { weight: 0.25, offset: 0.0, coeffs: vec![(0, -1.0)] },
            ],
            linear: vec![(1, -1.0)],
            constant: 0.0,
        });
        let sol = p.solve(vec![0.0, 1.0], &SolverConfig::default(), 1e9);
        let expected = (2.0 * (0.75f64 * 0.25).sqrt()).ln();
        assert!((sol.objective - expected).abs() < 1e-9);
        assert!((sol.x[0] + 3f64.ln() / 2.0).abs() < 1e-4);
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unbounded_program_diverges() {
        let mut p = ConvexProgram::new(1);
        p.objective = vec![(0, 1.0)];
        p.constraints.push(Constraint::Linear { coeffs: vec![(0, 1.0)], rhs: 1.0 });
        let sol = p.solve(vec![0.0], &SolverConfig::default(), 1e6);
        assert!(sol.diverged);
    }
}
