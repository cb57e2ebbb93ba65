//! One-period problems: `min_h log Σ w exp(o + s·h)` and its robust
//! counterpart `min_h max_g lse_g(h)`.

use nalgebra::{DMatrix, DVector};

use super::barrier::{Constraint, ConvexProgram, LseTerm};
use super::lp::{LinearProgram, LpStatus, Relation};
use super::SolverConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub weight: f64,
    pub offset: f64,
    pub slope: Vec<f64>,
}

impl Piece {
    pub fn new(weight: f64, offset: f64, slope: Vec<f64>) -> Self {
        Self { weight, offset, slope }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LseOutcome {
    Optimal,
    /// `slope·direction < 0` for every charged piece: the objective tends to
    /// −∞ along `direction`.
    Unbounded {
        direction: Vec<f64>,
    },
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct LseSolution {
    pub h: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub outcome: LseOutcome,
}

pub type MinimaxOutcome = LseOutcome;

#[derive(Debug, Clone)]
pub struct MinimaxSolution {
    pub h: Vec<f64>,
    pub value: f64,
    /// Groups whose value is within 1e-7 of the maximum at `h`.
    pub active: Vec<usize>,
    /// Convex weights on the groups (zero off the active set).
    pub weights: Vec<f64>,
    /// `‖Σ_g weights_g ∇f_g(h)‖`.
    pub stationarity: f64,
    pub outcome: MinimaxOutcome,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `log Σ w exp(offset + slope·h)`, stable for large exponents.
pub fn lse_value(pieces: &[Piece], h: &[f64]) -> f64 {
    let e: Vec<f64> =
        pieces.iter().filter(|p| p.weight > 0.0).map(|p| p.weight.ln() + p.offset + dot(&p.slope, h)).collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + e.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Value, gradient and Hessian of one log-sum-exp.
fn lse_derivs(pieces: &[Piece], h: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let n = h.len();
    let e: Vec<f64> = pieces
        .iter()
        .map(|p| if p.weight > 0.0 { p.weight.ln() + p.offset + dot(&p.slope, h) } else { f64::NEG_INFINITY })
        .collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = e.iter().map(|v| (v - m).exp()).sum();
    let mut g = vec![0.0; n];
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for (p, &ei) in pieces.iter().zip(&e) {
        let pi = (ei - m).exp() / s;
        if pi == 0.0 {
            continue;
        }
        for i in 0..n {
            g[i] += pi * p.slope[i];
            for j in 0..n {
                hess[(i, j)] += pi * p.slope[i] * p.slope[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            hess[(i, j)] -= g[i] * g[j];
        }
    }
    (m + s.ln(), g, hess)
}

fn check_pieces(pieces: &[Piece], n: usize) -> Result<()> {
    if pieces.iter().any(|p| p.slope.len() != n) {
        return Err(Error::Dimension(format!("piece slopes must have length {n}")));
    }
    if pieces.iter().any(|p| !(p.weight >= 0.0) || !p.offset.is_finite()) {
        return Err(Error::InvalidArgument("pieces need weight >= 0 and finite offsets".into()));
    }
    if !(pieces.iter().map(|p| p.weight).sum::<f64>() > 0.0) {
        return Err(Error::InvalidArgument("piece weights sum to zero".into()));
    }
    Ok(())
}

/// Looks for `v ∈ [-1,1]^n` with `slope·v <= -ε` on every charged piece,
/// maximizing `ε`. Returns the direction when `ε > 1e-9`.
fn recession_direction<'a>(
    slopes: impl Iterator<Item = &'a [f64]>,
    n: usize,
    cfg: &SolverConfig,
) -> Result<Option<Vec<f64>>> {
    if n == 0 {
        return Ok(None);
    }
    let mut lp = LinearProgram::maximize();
    let v: Vec<_> = (0..n).map(|_| lp.var(Some(-1.0), Some(1.0))).collect();
    let eps = lp.var(None, Some(1.0));
    lp.set_objective(eps, 1.0);
    for s in slopes {
        let mut row: Vec<_> = v.iter().zip(s).map(|(&vi, &si)| (vi, si)).collect();
        row.push((eps, 1.0));
        lp.constraint(row, Relation::Le, 0.0);
    }
    let r = lp.solve(cfg.lp_pivot_tol)?;
    if r.status == LpStatus::Optimal && r.value(eps) > 1e-9 {
        return Ok(Some(v.iter().map(|&vi| r.value(vi)).collect()));
    }
    Ok(None)
}

fn newton_step(hess: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let gv = DVector::from_column_slice(g);
    let scale = (0..n).map(|i| hess[(i, i)].abs()).fold(1e-12, f64::max);
    let mut shift = 0.0;
    for _ in 0..16 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += shift;
        }
        if let Some(ch) = h.cholesky() {
            let d = ch.solve(&(-&gv));
            if d.iter().all(|v| v.is_finite()) {
                return d.iter().cloned().collect();
            }
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 100.0 };
    }
    g.iter().map(|v| -v).collect()
}

/// Damped Newton from `h0` for `min_h log Σ w exp(offset + slope·h)`.
pub fn minimize_lse(pieces: &[Piece], h0: &[f64], cfg: &SolverConfig) -> Result<LseSolution> {
    let n = h0.len();
    check_pieces(pieces, n)?;
    let charged = pieces.iter().filter(|p| p.weight > 0.0).map(|p| p.slope.as_slice());
    if let Some(direction) = recession_direction(charged, n, cfg)? {
        return Ok(LseSolution {
            h: h0.to_vec(),
            value: f64::NEG_INFINITY,
            grad_norm: f64::NAN,
            iterations: 0,
            outcome: LseOutcome::Unbounded { direction },
        });
    }
    let mut h = h0.to_vec();
    let (mut f, mut g, mut hess) = lse_derivs(pieces, &h);
    let mut it = 0;
    while norm(&g) > cfg.grad_tol {
        if it >= cfg.max_iter {
            return Ok(LseSolution {
                grad_norm: norm(&g),
                value: f,
                h,
                iterations: it,
                outcome: LseOutcome::IterationLimit,
            });
        }
        it += 1;
        let d = newton_step(&hess, &g);
        let slope = dot(&g, &d);
        let mut s = 1.0;
        let mut trial = h.clone();
        let mut moved = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = h[i] + s * d[i];
            }
            let ft = lse_value(pieces, &trial);
            if ft <= f + cfg.armijo * s * slope {
                moved = true;
                break;
            }
            s *= cfg.backtrack;
        }
        if !moved {
            break;
        }
        h.copy_from_slice(&trial);
        let next = lse_derivs(pieces, &h);
        f = next.0;
        g = next.1;
        hess = next.2;
    }
    let gn = norm(&g);
    Ok(LseSolution {
        h,
        value: f,
        grad_norm: gn,
        iterations: it,
        outcome: if gn <= cfg.grad_tol.max(1e-8) { LseOutcome::Optimal } else { LseOutcome::IterationLimit },
    })
}

/// Smoothed objective `(1/μ) log Σ_g exp(μ f_g(h))` with derivatives.
fn smooth_max(groups: &[Vec<Piece>], h: &[f64], mu: f64) -> (f64, Vec<f64>, DMatrix<f64>) {
    let n = h.len();
    let parts: Vec<_> = groups.iter().map(|g| lse_derivs(g, h)).collect();
    let m = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = parts.iter().map(|p| (mu * (p.0 - m)).exp()).collect();
    let s: f64 = ws.iter().sum();
    let mut g = vec![0.0; n];
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for (w, p) in ws.iter().zip(&parts) {
        let w = w / s;
        for i in 0..n {
            g[i] += w * p.1[i];
        }
        hess += &p.2 * w;
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] += mu * w * p.1[i] * p.1[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            hess[(i, j)] -= mu * g[i] * g[j];
        }
    }
    (m + s.ln() / mu, g, hess)
}

fn max_value(groups: &[Vec<Piece>], h: &[f64]) -> f64 {
    groups.iter().map(|g| lse_value(g, h)).fold(f64::NEG_INFINITY, f64::max)
}

/// `min_h max_g lse_g(h)`: smoothing homotopy over `cfg.mu_schedule`, then a
/// barrier polish on the epigraph form whose multipliers certify optimality.
pub fn minimize_max_lse(groups: &[Vec<Piece>], h0: &[f64], cfg: &SolverConfig) -> Result<MinimaxSolution> {
    let n = h0.len();
    if groups.is_empty() {
        return Err(Error::InvalidArgument("minimax needs at least one group".into()));
    }
    for g in groups {
        check_pieces(g, n)?;
    }
    if groups.len() == 1 {
        let s = minimize_lse(&groups[0], h0, cfg)?;
        return Ok(MinimaxSolution {
            h: s.h,
            value: s.value,
            active: vec![0],
            weights: vec![1.0],
            stationarity: s.grad_norm,
            outcome: s.outcome,
        });
    }
    let charged = groups.iter().flat_map(|g| g.iter()).filter(|p| p.weight > 0.0).map(|p| p.slope.as_slice());
    if let Some(direction) = recession_direction(charged, n, cfg)? {
        return Ok(MinimaxSolution {
            h: h0.to_vec(),
            value: f64::NEG_INFINITY,
            active: Vec::new(),
            weights: vec![0.0; groups.len()],
            stationarity: f64::NAN,
            outcome: LseOutcome::Unbounded { direction },
        });
    }

    let mut h = h0.to_vec();
    for &mu in &cfg.mu_schedule {
        let (mut f, mut g, mut hess) = smooth_max(groups, &h, mu);
        for _ in 0..cfg.max_iter {
            if norm(&g) <= cfg.grad_tol {
                break;
            }
            let d = newton_step(&hess, &g);
            let slope = dot(&g, &d);
            let mut s = 1.0;
            let mut trial = h.clone();
            let mut moved = false;
            for _ in 0..60 {
                for i in 0..n {
                    trial[i] = h[i] + s * d[i];
                }
                let ft = smooth_max(groups, &trial, mu).0;
                if ft <= f + cfg.armijo * s * slope {
                    moved = true;
                    break;
                }
                s *= cfg.backtrack;
            }
            if !moved {
                break;
            }
            h.copy_from_slice(&trial);
            let next = smooth_max(groups, &h, mu);
            f = next.0;
            g = next.1;
            hess = next.2;
        }
    }

    // Polish: min z s.t. lse_g(h) - z <= 0, variables (h, z).
    let mut prog = ConvexProgram::new(n + 1);
    prog.objective = vec![(n, 1.0)];
    for g in groups {
        let terms = g
            .iter()
            .map(|p| LseTerm {
                weight: p.weight,
                offset: p.offset,
                coeffs: p.slope.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect(),
            })
            .collect();
        prog.constraints.push(Constraint::LogSumExp { terms, linear: vec![(n, -1.0)], constant: 0.0 });
    }
    let mut x0 = h.clone();
    x0.push(max_value(groups, &h) + 1.0);
    let sol = prog.solve(x0, cfg, 1e12);
    let polished = sol.x[..n].to_vec();
    let h = if max_value(groups, &polished) <= max_value(groups, &h) { polished } else { h };
    let value = max_value(groups, &h);

    let total: f64 = sol.multipliers.iter().sum();
    let values: Vec<f64> = groups.iter().map(|g| lse_value(g, &h)).collect();
    let mut weights: Vec<f64> = sol.multipliers.iter().map(|l| l / total).collect();
    let active: Vec<usize> = (0..groups.len()).filter(|&k| values[k] >= value - 1e-7).collect();
    for (k, w) in weights.iter_mut().enumerate() {
        if !active.contains(&k) {
            *w = 0.0;
        }
    }
    let wt: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= wt;
    }
    let mut grad = vec![0.0; n];
    for (k, g) in groups.iter().enumerate() {
        if weights[k] > 0.0 {
            let (_, gk, _) = lse_derivs(g, &h);
            for i in 0..n {
                grad[i] += weights[k] * gk[i];
            }
        }
    }
    let stationarity = norm(&grad);
    let outcome = if stationarity <= 1e-6 && !sol.diverged { LseOutcome::Optimal } else { LseOutcome::IterationLimit };
    Ok(MinimaxSolution { h, value, active, weights, stationarity, outcome })
}
