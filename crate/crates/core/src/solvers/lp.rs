//! Dense revised simplex.
//!
//! `solve_lp` handles the standard form `max c·x s.t. Ax = b, x >= 0`;
//! `LinearProgram` is a small builder that rewrites bounded/free variables
//! and inequality rows into that form and maps the answer back.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub value: f64,
    /// Row multipliers `y` with `Aᵀy >= c` at optimality (∂value/∂b).
    pub duals: Vec<f64>,
    pub iterations: usize,
}

const REFACTOR_EVERY: usize = 64;

struct Tableau<'a> {
    a: &'a DMatrix<f64>,
    b: &'a [f64],
    m: usize,
    n: usize,
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    since_refactor: usize,
}

impl<'a> Tableau<'a> {
    /// Column `j` of `[A | I]` (the identity block holds the artificials).
    fn column(&self, j: usize) -> Vec<f64> {
        if j < self.n {
            (0..self.m).map(|i| self.a[(i, j)]).collect()
        } else {
            let mut e = vec![0.0; self.m];
            e[j - self.n] = 1.0;
            e
        }
    }

    fn refactor(&mut self) -> bool {
        let m = self.m;
        let mut bm = DMatrix::<f64>::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            let col = self.column(j);
            for i in 0..m {
                bm[(i, k)] = col[i];
            }
        }
        match bm.try_inverse() {
            Some(inv) => {
                self.binv = inv;
                self.xb = (0..m).map(|i| (0..m).map(|k| self.binv[(i, k)] * self.b[k]).sum()).collect();
                for v in self.xb.iter_mut() {
                    if *v < 0.0 && *v > -1e-11 {
                        *v = 0.0;
                    }
                }
                self.since_refactor = 0;
                true
            }
            None => false,
        }
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        (0..m).map(|k| (0..m).map(|i| cost[self.basis[i]] * self.binv[(i, k)]).sum()).collect()
    }

    fn ftran(&self, col: &[f64]) -> Vec<f64> {
        let m = self.m;
        (0..m).map(|i| (0..m).map(|k| self.binv[(i, k)] * col[k]).sum()).collect()
    }

    fn pivot(&mut self, r: usize, enter: usize, d: &[f64]) {
        let m = self.m;
        let theta = self.xb[r] / d[r];
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * d[i];
                if self.xb[i] < 0.0 && self.xb[i] > -1e-11 {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        let piv = d[r];
        for k in 0..m {
            self.binv[(r, k)] /= piv;
        }
        for i in 0..m {
            if i != r && d[i] != 0.0 {
                let f = d[i];
                for k in 0..m {
                    let v = self.binv[(r, k)];
                    self.binv[(i, k)] -= f * v;
                }
            }
        }
        self.basis[r] = enter;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor();
        }
    }

    /// Maximizes `cost·x` over columns allowed by `eligible`.
    /// Returns `Ok(true)` at optimality, `Ok(false)` when unbounded. With
    /// `bounded`, a missing ratio-test row is numerical noise: the basis is
    /// refactored and, failing that, the column is skipped.
    fn run(
        &mut self,
        cost: &[f64],
        eligible: &dyn Fn(usize) -> bool,
        bounded: bool,
        tol: f64,
        iters: &mut usize,
        limit: usize,
    ) -> Result<bool> {
        let total = self.n + self.m;
        let mut bland = false;
        let mut banned = vec![false; total];
        loop {
            *iters += 1;
            if *iters > limit {
                return Err(Error::SolverTolerance(format!("simplex exceeded {limit} pivots")));
            }
            let y = self.duals(cost);
            let in_basis = {
                let mut v = vec![false; total];
                for &j in &self.basis {
                    v[j] = true;
                }
                v
            };
            let mut enter = None;
            let mut best = tol;
            for j in 0..total {
                if in_basis[j] || banned[j] || !eligible(j) {
                    continue;
                }
                let col = self.column(j);
                let rc = cost[j] - col.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
                if rc > tol {
                    if bland {
                        enter = Some(j);
                        break;
                    }
                    if rc > best {
                        best = rc;
                        enter = Some(j);
                    }
                }
            }
            let Some(enter) = enter else { return Ok(true) };
            let d = self.ftran(&self.column(enter));
            let dmax = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let ptol = 1e-9 * dmax.max(1.0);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.m {
                if d[i] > ptol {
                    let ratio = self.xb[i].max(0.0) / d[i];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                if !bounded {
                    return Ok(false);
                }
                if self.since_refactor > 0 && self.refactor() {
                    continue;
                }
                banned[enter] = true;
                continue;
            };
            // Degenerate steps switch pricing to Bland's rule, which cannot cycle.
            bland = best_ratio <= 1e-12;
            self.pivot(r, enter, &d);
        }
    }
}

/// Solves `max c·x s.t. Ax = b, x >= 0` with the two-phase revised simplex.
pub fn solve_lp(c: &[f64], a: &DMatrix<f64>, b: &[f64], pivot_tol: f64) -> Result<LpSolution> {
    let (m, n) = (a.nrows(), a.ncols());
    if c.len() != n || b.len() != m {
        return Err(Error::Dimension(format!("A is {m}x{n} but c has {} entries and b has {}", c.len(), b.len())));
    }
    // Row signs so that b >= 0.
    let signs: Vec<f64> = b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut a2 = a.clone();
    for i in 0..m {
        if signs[i] < 0.0 {
            for j in 0..n {
                a2[(i, j)] = -a2[(i, j)];
            }
        }
    }
    let b2: Vec<f64> = b.iter().zip(&signs).map(|(v, s)| v * s).collect();

    let mut t = Tableau {
        a: &a2,
        b: &b2,
        m,
        n,
        basis: (n..n + m).collect(),
        binv: DMatrix::identity(m, m),
        xb: b2.clone(),
        since_refactor: 0,
    };
    let limit = 50 * (m + n) + 1000;
    let mut iters = 0;

    // Phase 1: drive the artificials to zero.
    let mut cost1 = vec![0.0; n + m];
    for v in cost1.iter_mut().skip(n) {
        *v = -1.0;
    }
    t.run(&cost1, &|_| true, true, pivot_tol, &mut iters, limit)?;
    let infeas: f64 = t.basis.iter().zip(&t.xb).filter(|(&j, _)| j >= n).map(|(_, &v)| v).sum();
    let bscale = b2.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if infeas > 1e-9 * bscale {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            x: vec![0.0; n],
            value: f64::NAN,
            duals: vec![0.0; m],
            iterations: iters,
        });
    }
    // Pivot zero-level artificials out where possible; the rest sit on
    // redundant rows and stay at zero.
    for r in 0..m {
        if t.basis[r] < n {
            continue;
        }
        let row: Vec<f64> = (0..m).map(|k| t.binv[(r, k)]).collect();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if t.basis.contains(&j) {
                continue;
            }
            let v: f64 = (0..m).map(|k| row[k] * a2[(k, j)]).sum();
            if v.abs() > 1e-7 && best.map_or(true, |(_, bv)| v.abs() > bv.abs()) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            let d = t.ftran(&t.column(j));
            t.pivot(r, j, &d);
        }
    }
    t.refactor();

    // Phase 2.
    let mut cost2 = vec![0.0; n + m];
    cost2[..n].copy_from_slice(c);
    let bounded = t.run(&cost2, &|j| j < n, false, pivot_tol, &mut iters, limit)?;
    let mut x = vec![0.0; n];
    for (i, &j) in t.basis.iter().enumerate() {
        if j < n {
            x[j] = t.xb[i].max(0.0);
        }
    }
    let y = t.duals(&cost2);
    let duals: Vec<f64> = y.iter().zip(&signs).map(|(v, s)| v * s).collect();
    let value = c.iter().zip(&x).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        status: if bounded { LpStatus::Optimal } else { LpStatus::Unbounded },
        x,
        value,
        duals,
        iterations: iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
struct Var {
    lower: Option<f64>,
    upper: Option<f64>,
}

/// General-form LP: bounded/free variables and `<=`, `=`, `>=` rows.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    maximize: bool,
    vars: Vec<Var>,
    objective: Vec<f64>,
    rows: Vec<(Vec<(VarId, f64)>, Relation, f64)>,
}

#[derive(Debug, Clone)]
pub struct LpResult {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective: f64,
    /// ∂objective/∂rhs for each user row.
    pub duals: Vec<f64>,
}

impl LpResult {
    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }
}

impl LinearProgram {
    pub fn maximize() -> Self {
        Self { maximize: true, vars: Vec::new(), objective: Vec::new(), rows: Vec::new() }
    }

    pub fn minimize() -> Self {
        Self { maximize: false, ..Self::maximize() }
    }

    pub fn var(&mut self, lower: Option<f64>, upper: Option<f64>) -> VarId {
        self.vars.push(Var { lower, upper });
        self.objective.push(0.0);
        VarId(self.vars.len() - 1)
    }

    pub fn nonneg(&mut self) -> VarId {
        self.var(Some(0.0), None)
    }

    pub fn free(&mut self) -> VarId {
        self.var(None, None)
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn set_objective(&mut self, v: VarId, coef: f64) {
        self.objective[v.0] = coef;
    }

    pub fn add_objective(&mut self, v: VarId, coef: f64) {
        self.objective[v.0] += coef;
    }

    pub fn constraint(&mut self, coeffs: Vec<(VarId, f64)>, rel: Relation, rhs: f64) -> usize {
        self.rows.push((coeffs, rel, rhs));
        self.rows.len() - 1
    }

    pub fn solve(&self, pivot_tol: f64) -> Result<LpResult> {
        // Each user variable maps to `shift + Σ sign·column`.
        let mut cols = 0usize;
        let mut map: Vec<(f64, Vec<(usize, f64)>)> = Vec::with_capacity(self.vars.len());
        let mut extra_rows: Vec<(usize, f64)> = Vec::new();
        for v in &self.vars {
            match (v.lower, v.upper) {
                (Some(l), u) => {
                    map.push((l, vec![(cols, 1.0)]));
                    if let Some(u) = u {
                        extra_rows.push((cols, u - l));
                    }
                    cols += 1;
                }
                (None, Some(u)) => {
                    map.push((u, vec![(cols, -1.0)]));
                    cols += 1;
                }
                (None, None) => {
                    map.push((0.0, vec![(cols, 1.0), (cols + 1, -1.0)]));
                    cols += 2;
                }
            }
        }
        let n_struct = cols;
        let mut slack_rows = Vec::new();
        for (i, (_, rel, _)) in self.rows.iter().enumerate() {
            if *rel != Relation::Eq {
                slack_rows.push((i, cols));
                cols += 1;
            }
        }
        let mut bound_slacks = Vec::new();
        for _ in &extra_rows {
            bound_slacks.push(cols);
            cols += 1;
        }
        let m = self.rows.len() + extra_rows.len();
        let mut a = DMatrix::<f64>::zeros(m, cols);
        let mut b = vec![0.0; m];
        for (i, (coeffs, rel, rhs)) in self.rows.iter().enumerate() {
            let mut r = *rhs;
            for &(v, c) in coeffs {
                let (shift, parts) = &map[v.0];
                r -= c * shift;
                for &(j, s) in parts {
                    a[(i, j)] += c * s;
                }
            }
            b[i] = r;
            if let Some(&(_, sj)) = slack_rows.iter().find(|(ri, _)| *ri == i) {
                a[(i, sj)] = if *rel == Relation::Le { 1.0 } else { -1.0 };
            }
        }
        for (k, &(j, width)) in extra_rows.iter().enumerate() {
            let i = self.rows.len() + k;
            a[(i, j)] = 1.0;
            a[(i, bound_slacks[k])] = 1.0;
            b[i] = width;
        }
        let sense = if self.maximize { 1.0 } else { -1.0 };
        let mut c = vec![0.0; cols];
        let mut c0 = 0.0;
        for (v, &coef) in self.objective.iter().enumerate() {
            let (shift, parts) = &map[v];
            c0 += coef * shift;
            for &(j, s) in parts {
                c[j] += sense * coef * s;
            }
        }
        let _ = n_struct;
        let sol = solve_lp(&c, &a, &b, pivot_tol)?;
        let values: Vec<f64> =
            map.iter().map(|(shift, parts)| shift + parts.iter().map(|&(j, s)| s * sol.x[j]).sum::<f64>()).collect();
        let objective = match sol.status {
            LpStatus::Optimal => sense * sol.value + c0,
            LpStatus::Infeasible => f64::NAN,
            LpStatus::Unbounded => sense * f64::INFINITY,
        };
        let duals = sol.duals[..self.rows.len()].iter().map(|y| sense * y).collect();
        Ok(LpResult { status: sol.status, values, objective, duals })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_standard_form() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let s = solve_lp(&[1.0, 0.0], &a, &[1.0], 1e-10).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_eq!(s.x, vec![1.0, 0.0]);
        assert_eq!(s.value, 1.0);
        assert!((s.duals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = solve_lp(&[1.0, 0.0], &a, &[1.0, 2.0], 1e-10).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let s = solve_lp(&[1.0, 0.0], &a, &[1.0], 1e-10).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!(solve_lp(&[1.0], &a, &[1.0], 1e-10).is_err());
    }

    #[test]
    fn redundant_rows() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let s = solve_lp(&[0.0, 1.0], &a, &[1.0, 2.0], 1e-10).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn builder_bounds_and_relations() {
        // min x - y s.t. x + y >= 1, x <= 3, y in [-2, 0.5], x free
        let mut lp = LinearProgram::minimize();
        let x = lp.free();
        let y = lp.var(Some(-2.0), Some(0.5));
        lp.set_objective(x, 1.0);
        lp.set_objective(y, -1.0);
        lp.constraint(vec![(x, 1.0), (y, 1.0)], Relation::Ge, 1.0);
        lp.constraint(vec![(x, 1.0)], Relation::Le, 3.0);
        let r = lp.solve(1e-10).unwrap();
        assert_eq!(r.status, LpStatus::Optimal);
        assert!((r.value(x) - 0.5).abs() < 1e-12);
        assert!((r.value(y) - 0.5).abs() < 1e-12);
        assert!(r.objective.abs() < 1e-12);
        // relaxing x + y >= 1 by δ lowers the optimum by δ
        assert!((r.duals[0] - 1.0).abs() < 1e-12);
    }
}
