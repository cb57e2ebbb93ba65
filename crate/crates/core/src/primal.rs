//! Robust exponential-utility values on the lifted tree.
//!
//! The log-domain value `L = inf_H sup_{P,θ} log E[exp(g̃ + (H∘X)_T)]` with
//! positions `H` keyed by market nodes only is a convex program: along a path
//! the exponent is affine in each node's price `X_ω`, so the adversary's θ at
//! ω contributes `max_{X ∈ box} (H_parent − H_ω)·X`, and the prior choice at ω
//! contributes a max over extremes of a log-sum-exp. The program is solved
//! with the barrier method; its multipliers are the dual martingale measure.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::LiftedTree;
use crate::market::MarketSpec;
use crate::solvers::{
    minimize_max_lse, BarrierSolution, Constraint, ConvexProgram, LseOutcome, LseTerm, Piece, SolverConfig,
};

/// Positions or static option holdings beyond this magnitude are read as an
/// arbitrage the optimizer is exploiting.
pub const POSITION_BOUND: f64 = 1e6;

/// Terminal payoff in the log domain.
#[derive(Debug, Clone)]
pub enum Payoff {
    /// `g̃ = φ·X_T` with `φ[leaf]` a d-vector.
    Claim(Vec<Vec<f64>>),
    /// Arbitrary table `g̃[leaf][grid point]`.
    Table(Vec<Vec<f64>>),
}

/// Treatment of the static options, in log-domain units `ℓ' = γℓ`.
#[derive(Debug, Clone)]
pub enum Statics {
    Fixed(Vec<f64>),
    Optimize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProgramDual {
    /// Conditional measure over children at every charged internal node.
    pub cond: Vec<Vec<f64>>,
    /// Normalized mixture weights over prior extremes.
    pub mix: Vec<Vec<f64>>,
    /// Price system `Z` (length d, numéraire 1) on charged nodes.
    pub z: Vec<Vec<f64>>,
    /// For table payoffs: distribution over grid points at each leaf.
    pub leaf_atoms: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueFields {
    /// `g[node][point]`: the terminal payoff table on leaves; on internal
    /// nodes the value `(Ĥ_parent − Ĥ_ω)·X_ω(θ) + cont(ω)` of entering ω at
    /// grid point θ while following Ĥ.
    pub g: Vec<Vec<f64>>,
    /// `max_k log Σ_c p_k(c) exp(value(c))` on internal nodes.
    pub cont: Vec<f64>,
    /// `max_θ g[node][θ]` (leaves: `max_θ g̃ + Ĥ_parent·X`).
    pub node_value: Vec<f64>,
    /// `V̄ = max_θ₀ g₀(θ₀)`.
    pub root_value: f64,
    /// `L`; equal to `V̄` since the option cost sits in the claim's numéraire leg.
    pub log_value: f64,
    /// Optimal positions on internal nodes (numéraire entry 0).
    pub h: Vec<Vec<f64>>,
    /// Log-domain static positions.
    pub ell: Vec<f64>,
    /// For claim payoffs: terminal claim after options, `φ − Σℓ'ζ + cost·e_d`.
    pub claim: Option<Vec<Vec<f64>>>,
    pub dual: ProgramDual,
    pub gap_bound: f64,
}

struct Layout {
    h: Vec<Option<usize>>,
    u: Vec<Option<usize>>,
    s: Vec<Option<usize>>,
    e: Vec<Option<usize>>,
    ell: Vec<usize>,
    abs: Vec<usize>,
    n: usize,
}

struct Rows {
    alpha: Vec<Vec<usize>>,
    beta: Vec<Vec<usize>>,
    lse: Vec<Vec<usize>>,
    table: Vec<Vec<usize>>,
    ell_pos: Vec<usize>,
    ell_neg: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(w: &[f64], v: &[f64]) -> f64 {
    let m = w.iter().zip(v).filter(|(w, _)| **w > 0.0).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + w.iter().zip(v).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * (v - m).exp()).sum::<f64>().ln()
}

/// Children charged by some extreme at `n`, as (position in child list, node).
fn charged_children(spec: &MarketSpec, n: usize) -> Vec<(usize, usize)> {
    spec.tree
        .children(n)
        .iter()
        .enumerate()
        .filter(|&(ci, _)| spec.priors.extremes[n].iter().any(|p| p[ci] > 0.0))
        .map(|(ci, &c)| (ci, c))
        .collect()
}

struct Builder<'a> {
    spec: &'a MarketSpec,
    lift: &'a LiftedTree,
    payoff: &'a Payoff,
    statics: &'a Statics,
    r: usize,
}

impl<'a> Builder<'a> {
    fn layout(&self) -> Layout {
        let nn = self.spec.tree.len();
        let mut idx = 0;
        let mut take = |k: usize| {
            let s = idx;
            idx += k;
            s
        };
        let mut h = vec![None; nn];
        let mut u = vec![None; nn];
        let mut s = vec![None; nn];
        let mut e = vec![None; nn];
        for k in 0..nn {
            if !self.spec.charged[k] {
                continue;
            }
            if self.spec.tree.is_terminal(k) {
                match self.payoff {
                    Payoff::Claim(_) => s[k] = Some(take(self.r)),
                    Payoff::Table(_) => e[k] = Some(take(1)),
                }
            } else {
                h[k] = Some(take(self.r));
                u[k] = Some(take(1));
                s[k] = Some(take(self.r));
            }
        }
        let (ell, abs) = match self.statics {
            Statics::Optimize => {
                let e = self.spec.num_options();
                ((0..e).map(|_| take(1)).collect(), (0..e).map(|_| take(1)).collect())
            }
            Statics::Fixed(_) => (Vec::new(), Vec::new()),
        };
        Layout { h, u, s, e, ell, abs, n: idx }
    }

    fn fixed_ell(&self) -> Vec<f64> {
        match self.statics {
            Statics::Fixed(l) => l.clone(),
            Statics::Optimize => vec![0.0; self.spec.num_options()],
        }
    }

    /// Coefficients of `δ_ω,i` in the program variables plus constant part.
    fn delta(&self, lay: &Layout, k: usize, i: usize) -> (Vec<(usize, f64)>, f64) {
        let spec = self.spec;
        let mut coeffs = Vec::new();
        let mut constant = 0.0;
        if let Some(p) = spec.tree.nodes[k].parent {
            coeffs.push((lay.h[p].unwrap() + i, 1.0));
        }
        if spec.tree.is_terminal(k) {
            // δ = H_parent + ψ with ψ = φ − Σ ℓ'ζ (risky part).
            if let Payoff::Claim(phi) = self.payoff {
                constant += phi[k][i];
            }
            let fixed = self.fixed_ell();
            for (j, o) in spec.claims.options.iter().enumerate() {
                match self.statics {
                    Statics::Optimize => coeffs.push((lay.ell[j], -o.payoff[k][i])),
                    Statics::Fixed(_) => constant -= fixed[j] * o.payoff[k][i],
                }
            }
        } else {
            coeffs.push((lay.h[k].unwrap() + i, -1.0));
        }
        (coeffs, constant)
    }

    /// Numéraire part of the leaf exponent as (coeffs, constant).
    fn leaf_cash(&self, lay: &Layout, k: usize) -> (Vec<(usize, f64)>, f64) {
        let d = self.spec.d();
        let mut coeffs = Vec::new();
        let mut constant = match self.payoff {
            Payoff::Claim(phi) => phi[k][d - 1],
            Payoff::Table(_) => 0.0,
        };
        let fixed = self.fixed_ell();
        for (j, o) in self.spec.claims.options.iter().enumerate() {
            match self.statics {
                Statics::Optimize => coeffs.push((lay.ell[j], -o.payoff[k][d - 1])),
                Statics::Fixed(_) => constant += -fixed[j] * o.payoff[k][d - 1] + fixed[j].abs() * o.cost,
            }
        }
        (coeffs, constant)
    }

    /// Exponent of child `c` in its parent's log-sum-exp, as linear form.
    fn child_exponent(&self, lay: &Layout, c: usize) -> (Vec<(usize, f64)>, f64) {
        if !self.spec.tree.is_terminal(c) {
            return (vec![(lay.u[c].unwrap(), 1.0)], 0.0);
        }
        match self.payoff {
            Payoff::Claim(_) => {
                let (mut coeffs, constant) = self.leaf_cash(lay, c);
                for i in 0..self.r {
                    coeffs.push((lay.s[c].unwrap() + i, 1.0));
                }
                (coeffs, constant)
            }
            Payoff::Table(_) => (vec![(lay.e[c].unwrap(), 1.0)], 0.0),
        }
    }

    fn build(&self, lay: &Layout) -> (ConvexProgram, Rows) {
        let spec = self.spec;
        let nn = spec.tree.len();
        let mut prog = ConvexProgram::new(lay.n);
        let mut rows = Rows {
            alpha: vec![Vec::new(); nn],
            beta: vec![Vec::new(); nn],
            lse: vec![Vec::new(); nn],
            table: vec![Vec::new(); nn],
            ell_pos: Vec::new(),
            ell_neg: Vec::new(),
        };
        prog.objective.push((lay.u[0].expect("root is internal"), 1.0));
        for (j, o) in spec.claims.options.iter().enumerate() {
            if let Statics::Optimize = self.statics {
                prog.objective.push((lay.abs[j], o.cost));
            }
        }
        let push = |prog: &mut ConvexProgram, c: Constraint| {
            prog.constraints.push(c);
            prog.constraints.len() - 1
        };
        for k in 0..nn {
            if !spec.charged[k] {
                continue;
            }
            if let Some(s0) = lay.s[k] {
                for i in 0..self.r {
                    let (dc, dconst) = self.delta(lay, k, i);
                    for (bound, store) in [(self.lift.hi[k][i], 0), (self.lift.lo[k][i], 1)] {
                        let mut coeffs: Vec<(usize, f64)> = dc.iter().map(|&(v, a)| (v, a * bound)).collect();
                        coeffs.push((s0 + i, -1.0));
                        let row = push(&mut prog, Constraint::Linear { coeffs, rhs: -dconst * bound });
                        if store == 0 {
                            rows.alpha[k].push(row);
                        } else {
                            rows.beta[k].push(row);
                        }
                    }
                }
            }
            if let (Some(e0), Payoff::Table(table)) = (lay.e[k], self.payoff) {
                // e ≥ g̃(θ) + H_parent·X(θ) for every grid point.
                let p = spec.tree.nodes[k].parent.unwrap();
                for (pt, x) in self.lift.x[k].iter().enumerate() {
                    let mut coeffs: Vec<(usize, f64)> = (0..self.r).map(|i| (lay.h[p].unwrap() + i, x[i])).collect();
                    coeffs.push((e0, -1.0));
                    rows.table[k].push(push(&mut prog, Constraint::Linear { coeffs, rhs: -table[k][pt] }));
                }
            }
            if spec.tree.is_terminal(k) {
                continue;
            }
            let kids = charged_children(spec, k);
            let exps: Vec<_> = kids.iter().map(|&(_, c)| self.child_exponent(lay, c)).collect();
            for p in &spec.priors.extremes[k] {
                let terms = kids
                    .iter()
                    .zip(&exps)
                    .map(|(&(ci, _), (coeffs, constant))| LseTerm {
                        weight: p[ci],
                        offset: *constant,
                        coeffs: coeffs.clone(),
                    })
                    .collect();
                let mut linear: Vec<(usize, f64)> = (0..self.r).map(|i| (lay.s[k].unwrap() + i, 1.0)).collect();
                linear.push((lay.u[k].unwrap(), -1.0));
                rows.lse[k].push(push(&mut prog, Constraint::LogSumExp { terms, linear, constant: 0.0 }));
            }
        }
        for k in 0..nn {
            if let Some(h0) = lay.h[k] {
                for i in 0..self.r {
                    push(&mut prog, Constraint::Linear { coeffs: vec![(h0 + i, 1.0)], rhs: POSITION_BOUND });
                    push(&mut prog, Constraint::Linear { coeffs: vec![(h0 + i, -1.0)], rhs: POSITION_BOUND });
                }
            }
        }
        for j in 0..lay.ell.len() {
            let (l, a) = (lay.ell[j], lay.abs[j]);
            rows.ell_pos.push(push(&mut prog, Constraint::Linear { coeffs: vec![(l, 1.0), (a, -1.0)], rhs: 0.0 }));
            rows.ell_neg.push(push(&mut prog, Constraint::Linear { coeffs: vec![(l, -1.0), (a, -1.0)], rhs: 0.0 }));
            push(&mut prog, Constraint::Linear { coeffs: vec![(l, 1.0)], rhs: POSITION_BOUND });
            push(&mut prog, Constraint::Linear { coeffs: vec![(l, -1.0)], rhs: POSITION_BOUND });
        }
        (prog, rows)
    }

    /// Strictly feasible point: zero positions, slack 1 everywhere.
    fn start(&self, lay: &Layout, prog: &ConvexProgram) -> Vec<f64> {
        let spec = self.spec;
        let mut x = vec![0.0; lay.n];
        for j in 0..lay.abs.len() {
            x[lay.abs[j]] = 1.0;
        }
        for k in (0..spec.tree.len()).rev() {
            if !spec.charged[k] {
                continue;
            }
            if let Some(s0) = lay.s[k] {
                for i in 0..self.r {
                    let (dc, dconst) = self.delta(lay, k, i);
                    let dv = dconst + dc.iter().map(|&(v, a)| a * x[v]).sum::<f64>();
                    x[s0 + i] = (self.lift.hi[k][i] * dv).max(self.lift.lo[k][i] * dv) + 1.0;
                }
            }
            if let (Some(e0), Payoff::Table(table)) = (lay.e[k], self.payoff) {
                x[e0] = table[k].iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            }
            if spec.tree.is_terminal(k) {
                continue;
            }
            let kids = charged_children(spec, k);
            let vals: Vec<f64> = kids
                .iter()
                .map(|&(_, c)| {
                    let (coeffs, constant) = self.child_exponent(lay, c);
                    constant + coeffs.iter().map(|&(v, a)| a * x[v]).sum::<f64>()
                })
                .collect();
            let cont = spec.priors.extremes[k]
                .iter()
                .map(|p| {
                    let w: Vec<f64> = kids.iter().map(|&(ci, _)| p[ci]).collect();
                    log_sum_exp(&w, &vals)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let ssum: f64 = (0..self.r).map(|i| x[lay.s[k].unwrap() + i]).sum();
            x[lay.u[k].unwrap()] = ssum + cont + 1.0;
        }
        debug_assert!(prog.is_strictly_feasible(&x));
        x
    }
}

/// Solves the lifted robust problem for a log-domain payoff.
pub fn backward_induction(
    spec: &MarketSpec,
    lift: &LiftedTree,
    payoff: &Payoff,
    statics: &Statics,
    cfg: &SolverConfig,
) -> Result<ValueFields> {
    if matches!(payoff, Payoff::Table(_)) && spec.num_options() > 0 {
        if let Statics::Optimize = statics {
            return Err(Error::InvalidArgument("static options need a claim payoff".into()));
        }
    }
    if let Statics::Fixed(l) = statics {
        if l.len() != spec.num_options() {
            return Err(Error::Dimension(format!("expected {} static positions, got {}", spec.num_options(), l.len())));
        }
        if matches!(payoff, Payoff::Table(_)) && l.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument("static options need a claim payoff".into()));
        }
    }
    let b = Builder { spec, lift, payoff, statics, r: spec.cones.risky() };
    let lay = b.layout();
    let (prog, rows) = b.build(&lay);
    let x0 = b.start(&lay, &prog);
    let sol = prog.solve(x0, cfg, 10.0 * POSITION_BOUND);
    check_solution(spec, &lay, &sol)?;
    Ok(assemble(&b, &lay, &rows, &sol))
}

fn check_solution(spec: &MarketSpec, lay: &Layout, sol: &BarrierSolution) -> Result<()> {
    let limit = 0.5 * POSITION_BOUND;
    for k in 0..spec.tree.len() {
        if let Some(h0) = lay.h[k] {
            if (0..spec.cones.risky()).any(|i| sol.x[h0 + i].abs() > limit) {
                return Err(Error::Arbitrage {
                    node: spec.tree.nodes[k].id.clone(),
                    detail: "the robust value is unbounded below (positions diverge)".into(),
                });
            }
        }
    }
    if lay.ell.iter().any(|&j| sol.x[j].abs() > limit) {
        return Err(Error::OptionArbitrage(
            "static option positions diverge: some Σ ℓ_i ζ_i − |ℓ_i| c_i is an arbitrage".into(),
        ));
    }
    if sol.gap_bound > 1e-6 || !sol.objective.is_finite() {
        return Err(Error::SolverTolerance(format!("barrier stopped with gap bound {:e}", sol.gap_bound)));
    }
    Ok(())
}

fn assemble(b: &Builder, lay: &Layout, rows: &Rows, sol: &BarrierSolution) -> ValueFields {
    let spec = b.spec;
    let lift = b.lift;
    let (nn, d, r) = (spec.tree.len(), spec.d(), b.r);
    let x = &sol.x;
    let lam = &sol.multipliers;
    let h: Vec<Vec<f64>> = (0..nn)
        .map(|k| match lay.h[k] {
            Some(h0) => {
                let mut v = x[h0..h0 + r].to_vec();
                v.push(0.0);
                v
            }
            None if !spec.tree.is_terminal(k) => vec![0.0; d],
            None => Vec::new(),
        })
        .collect();
    let ell: Vec<f64> = match b.statics {
        Statics::Optimize => lay.ell.iter().map(|&j| x[j]).collect(),
        Statics::Fixed(l) => l.clone(),
    };
    let cost: f64 = ell.iter().zip(&spec.claims.options).map(|(l, o)| l.abs() * o.cost).sum();

    // Terminal payoff table at the final static positions.
    let claim = match b.payoff {
        Payoff::Claim(phi) => Some(
            (0..nn)
                .map(|k| {
                    if !spec.tree.is_terminal(k) {
                        return Vec::new();
                    }
                    let mut v = phi[k].clone();
                    for (l, o) in ell.iter().zip(&spec.claims.options) {
                        for i in 0..d {
                            v[i] -= l * o.payoff[k][i];
                        }
                    }
                    v[d - 1] += cost;
                    v
                })
                .collect::<Vec<_>>(),
        ),
        Payoff::Table(_) => None,
    };
    let leaf_table = |k: usize| -> Vec<f64> {
        match (b.payoff, &claim) {
            (Payoff::Table(t), _) => t[k].clone(),
            (_, Some(cl)) => lift.x[k].iter().map(|xv| dot(&cl[k], xv)).collect(),
            _ => unreachable!(),
        }
    };

    // Values recomputed exactly from Ĥ, bottom-up.
    let mut g = vec![Vec::new(); nn];
    let mut cont = vec![f64::NAN; nn];
    let mut node_value = vec![f64::NAN; nn];
    for k in (0..nn).rev() {
        if !spec.charged[k] {
            continue;
        }
        let hin = match spec.tree.nodes[k].parent {
            Some(p) => h[p].clone(),
            None => vec![0.0; d],
        };
        if spec.tree.is_terminal(k) {
            g[k] = leaf_table(k);
            node_value[k] = g[k]
                .iter()
                .zip(&lift.x[k])
                .map(|(v, xv)| v + dot(&hin[..r], &xv[..r]))
                .fold(f64::NEG_INFINITY, f64::max);
            continue;
        }
        let kids = charged_children(spec, k);
        let vals: Vec<f64> = kids.iter().map(|&(_, c)| node_value[c]).collect();
        cont[k] = spec.priors.extremes[k]
            .iter()
            .map(|p| {
                let w: Vec<f64> = kids.iter().map(|&(ci, _)| p[ci]).collect();
                log_sum_exp(&w, &vals)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let delta: Vec<f64> = (0..r).map(|i| hin[i] - h[k][i]).collect();
        g[k] = lift.x[k].iter().map(|xv| dot(&delta, &xv[..r]) + cont[k]).collect();
        node_value[k] = g[k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    let root_value = node_value[0];

    // Dual measure from the multipliers.
    let mut cond = vec![Vec::new(); nn];
    let mut mix = vec![Vec::new(); nn];
    let mut z = vec![Vec::new(); nn];
    let mut leaf_atoms = vec![Vec::new(); nn];
    for k in 0..nn {
        if !spec.charged[k] {
            continue;
        }
        let mut zk: Vec<f64> = (0..r)
            .map(|i| {
                if rows.alpha[k].is_empty() {
                    return f64::NAN;
                }
                let (a, bb) = (lam[rows.alpha[k][i]], lam[rows.beta[k][i]]);
                (a * lift.hi[k][i] + bb * lift.lo[k][i]) / (a + bb)
            })
            .collect();
        if !rows.table[k].is_empty() {
            let w: Vec<f64> = rows.table[k].iter().map(|&j| lam[j]).collect();
            let tot: f64 = w.iter().sum();
            leaf_atoms[k] = w.iter().enumerate().map(|(p, v)| (p, v / tot)).collect();
            zk = (0..r).map(|i| leaf_atoms[k].iter().map(|&(p, v)| v * lift.x[k][p][i]).sum()).collect();
        }
        zk.push(1.0);
        z[k] = zk;
        if spec.tree.is_terminal(k) {
            continue;
        }
        let kids = charged_children(spec, k);
        let vals: Vec<f64> = kids.iter().map(|&(_, c)| node_value[c]).collect();
        let wl: Vec<f64> = rows.lse[k].iter().map(|&j| lam[j]).collect();
        let tot: f64 = wl.iter().sum();
        mix[k] = wl.iter().map(|v| v / tot).collect();
        let mut qc = vec![0.0; spec.tree.children(k).len()];
        for (p, w) in spec.priors.extremes[k].iter().zip(&mix[k]) {
            let weights: Vec<f64> = kids.iter().map(|&(ci, _)| p[ci]).collect();
            let norm = log_sum_exp(&weights, &vals);
            for (&(ci, _), v) in kids.iter().zip(&vals) {
                if p[ci] > 0.0 {
                    qc[ci] += w * p[ci] * (v - norm).exp();
                }
            }
        }
        let tot: f64 = qc.iter().sum();
        cond[k] = qc.iter().map(|v| v / tot).collect();
    }

    ValueFields {
        g,
        cont,
        node_value,
        root_value,
        log_value: root_value,
        h,
        ell,
        claim,
        dual: ProgramDual { cond, mix, z, leaf_atoms },
        gap_bound: sol.gap_bound,
    }
}

/// `sup` over priors and θ-kernels of `log E[exp(g̃ + (H∘X)_T)]` for fixed
/// positions, by exhaustive recursion over every (node, grid point) of the
/// lifted tree. `table[leaf][point]` is the terminal log-domain payoff.
pub fn replay(spec: &MarketSpec, lift: &LiftedTree, h: &[Vec<f64>], table: &[Vec<f64>]) -> f64 {
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    // best[k] = max over θ at k of the lifted-node value.
    let mut best = vec![f64::NAN; nn];
    for k in (0..nn).rev() {
        if !spec.charged[k] {
            continue;
        }
        let hin: Vec<f64> = match spec.tree.nodes[k].parent {
            Some(p) => h[p][..r].to_vec(),
            None => vec![0.0; r],
        };
        let lifted: Vec<f64> = if spec.tree.is_terminal(k) {
            (0..lift.points()).map(|p| table[k][p] + dot(&hin, &lift.x[k][p][..r])).collect()
        } else {
            let kids = charged_children(spec, k);
            let vals: Vec<f64> = kids.iter().map(|&(_, c)| best[c]).collect();
            let cont = spec.priors.extremes[k]
                .iter()
                .map(|p| {
                    let w: Vec<f64> = kids.iter().map(|&(ci, _)| p[ci]).collect();
                    log_sum_exp(&w, &vals)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (0..lift.points())
                .map(|p| (0..r).map(|i| (hin[i] - h[k][i]) * lift.x[k][p][i]).sum::<f64>() + cont)
                .collect()
        };
        best[k] = lifted.into_iter().fold(f64::NEG_INFINITY, f64::max);
    }
    best[0]
}

impl ValueFields {
    /// Terminal log-domain payoff table `g̃[leaf][point]`.
    pub fn payoff_table(&self, spec: &MarketSpec) -> Vec<Vec<f64>> {
        (0..spec.tree.len()).map(|k| if spec.tree.is_terminal(k) { self.g[k].clone() } else { Vec::new() }).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractedStrategy {
    pub h: Vec<Vec<f64>>,
    /// Exhaustive replay value of the extracted positions.
    pub replay_value: f64,
    /// Largest minimax stationarity residual over the forward pass.
    pub stationarity: f64,
}

/// Forward pass: at every charged internal node, given the position carried
/// in, re-solves the one-period minimax over (θ corner at the node, prior
/// extreme, θ corners at the children) with the continuation values fixed.
pub fn extract_strategy(
    spec: &MarketSpec,
    lift: &LiftedTree,
    fields: &ValueFields,
    cfg: &SolverConfig,
    replay_tol: f64,
) -> Result<ExtractedStrategy> {
    let nn = spec.tree.len();
    let d = spec.d();
    let r = d - 1;
    let mut h = fields.h.clone();
    let mut worst_stat = 0.0f64;
    let corners = &lift.corners;
    for k in 0..nn {
        if spec.tree.is_terminal(k) || !spec.charged[k] {
            continue;
        }
        let hin: Vec<f64> = match spec.tree.nodes[k].parent {
            Some(p) => h[p][..r].to_vec(),
            None => vec![0.0; r],
        };
        let kids = charged_children(spec, k);
        // Per child and corner: (offset excluding h_in·X_ω, price X_c).
        let child_opts: Vec<Vec<(f64, &[f64])>> = kids
            .iter()
            .map(|&(_, c)| {
                corners_or_all(spec, lift, c, fields.claim.is_some())
                    .iter()
                    .map(|&p| {
                        let xc = &lift.x[c][p][..r];
                        let off = if spec.tree.is_terminal(c) {
                            fields.g[c][p]
                        } else {
                            fields.cont[c] - dot(&h[c][..r], xc)
                        };
                        (off, xc)
                    })
                    .collect()
            })
            .collect();
        let count = corners.len() as f64
            * spec.priors.extremes[k].len() as f64
            * child_opts.iter().map(|o| o.len() as f64).product::<f64>();
        let hk = if count > MAX_GROUPS {
            let (hk, stat) = node_epigraph(spec, lift, k, &hin, &h[k][..r], &kids, &child_opts, cfg)?;
            worst_stat = worst_stat.max(stat);
            hk
        } else {
            let mut groups = Vec::new();
            for &pt in corners {
                let xw = &lift.x[k][pt][..r];
                let base = dot(&hin, xw);
                for p in &spec.priors.extremes[k] {
                    let mut sigma = vec![0usize; kids.len()];
                    loop {
                        let pieces = kids
                            .iter()
                            .enumerate()
                            .map(|(j, &(ci, _))| {
                                let (off, xc) = child_opts[j][sigma[j]];
                                Piece::new(p[ci], base + off, (0..r).map(|i| xc[i] - xw[i]).collect())
                            })
                            .collect();
                        groups.push(pieces);
                        let mut j = 0;
                        while j < sigma.len() {
                            sigma[j] += 1;
                            if sigma[j] < child_opts[j].len() {
                                break;
                            }
                            sigma[j] = 0;
                            j += 1;
                        }
                        if j == sigma.len() {
                            break;
                        }
                    }
                }
            }
            let start = vec![0.0; r];
            let sol = minimize_max_lse(&groups, &start, cfg)?;
            match sol.outcome {
                LseOutcome::Unbounded { .. } => {
                    return Err(Error::Arbitrage {
                        node: spec.tree.nodes[k].id.clone(),
                        detail: "one-period problem is unbounded below".into(),
                    })
                }
                LseOutcome::IterationLimit | LseOutcome::Optimal => {}
            }
            worst_stat = worst_stat.max(sol.stationarity);
            sol.h
        };
        let mut hk = hk;
        hk.push(0.0);
        h[k] = hk;
    }
    let table = fields.payoff_table(spec);
    let replay_value = replay(spec, lift, &h, &table);
    if (replay_value - fields.root_value).abs() > replay_tol {
        return Err(Error::SolverTolerance(format!(
            "strategy replay {replay_value} differs from the root value {} by more than {replay_tol:e}",
            fields.root_value
        )));
    }
    Ok(ExtractedStrategy { h, replay_value, stationarity: worst_stat })
}

/// Above this many (θ corner, prior, child-corner assignment) groups the
/// one-period problem is solved in epigraph form instead.
const MAX_GROUPS: f64 = 64.0;

/// The one-period problem of [`extract_strategy`] with each child's θ-max
/// and the node's θ-max as epigraph variables: linear in the number of
/// corners instead of exponential in the number of children.
#[allow(clippy::too_many_arguments)]
fn node_epigraph(
    spec: &MarketSpec,
    lift: &LiftedTree,
    k: usize,
    hin: &[f64],
    h0: &[f64],
    kids: &[(usize, usize)],
    child_opts: &[Vec<(f64, &[f64])>],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, f64)> {
    let r = hin.len();
    let (u, v) = (r, r + 1);
    let e = |j: usize| r + 2 + j;
    let mut prog = ConvexProgram::new(r + 2 + kids.len());
    prog.objective = vec![(u, 1.0), (v, 1.0)];
    let mut x0: Vec<f64> = h0.to_vec();
    let mut umax = f64::NEG_INFINITY;
    for &pt in &lift.corners {
        let xw = &lift.x[k][pt][..r];
        let mut coeffs: Vec<(usize, f64)> = (0..r).map(|i| (i, -xw[i])).collect();
        coeffs.push((u, -1.0));
        prog.constraints.push(Constraint::Linear { coeffs, rhs: -dot(hin, xw) });
        umax = umax.max((0..r).map(|i| (hin[i] - h0[i]) * xw[i]).sum());
    }
    let mut emax = Vec::new();
    for (j, opts) in child_opts.iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for &(off, xc) in opts {
            let mut coeffs: Vec<(usize, f64)> = (0..r).map(|i| (i, xc[i])).collect();
            coeffs.push((e(j), -1.0));
            prog.constraints.push(Constraint::Linear { coeffs, rhs: -off });
            m = m.max(off + dot(h0, xc));
        }
        emax.push(m + 1.0);
    }
    let mut vmax = f64::NEG_INFINITY;
    for p in &spec.priors.extremes[k] {
        let terms: Vec<LseTerm> = kids
            .iter()
            .enumerate()
            .filter(|&(_, &(ci, _))| p[ci] > 0.0)
            .map(|(j, &(ci, _))| LseTerm { weight: p[ci], offset: 0.0, coeffs: vec![(e(j), 1.0)] })
            .collect();
        let w: Vec<f64> = kids.iter().map(|&(ci, _)| p[ci]).collect();
        vmax = vmax.max(log_sum_exp(&w, &emax));
        prog.constraints.push(Constraint::LogSumExp { terms, linear: vec![(v, -1.0)], constant: 0.0 });
    }
    for i in 0..r {
        prog.constraints.push(Constraint::Linear { coeffs: vec![(i, 1.0)], rhs: POSITION_BOUND });
        prog.constraints.push(Constraint::Linear { coeffs: vec![(i, -1.0)], rhs: POSITION_BOUND });
    }
    x0.push(umax + 1.0);
    x0.push(vmax + 1.0);
    x0.extend(emax);
    let sol = prog.solve(x0, cfg, 10.0 * POSITION_BOUND);
    if sol.diverged || sol.x[..r].iter().any(|v| v.abs() > 0.5 * POSITION_BOUND) {
        return Err(Error::Arbitrage {
            node: spec.tree.nodes[k].id.clone(),
            detail: "one-period problem is unbounded below".into(),
        });
    }
    Ok((sol.x[..r].to_vec(), sol.gap_bound))
}

/// Leaves with an arbitrary payoff table need every grid point; otherwise
/// box corners attain every max of an affine function of X.
fn corners_or_all(spec: &MarketSpec, lift: &LiftedTree, c: usize, affine: bool) -> Vec<usize> {
    if spec.tree.is_terminal(c) && !affine {
        (0..lift.points()).collect()
    } else {
        lift.corners.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustValue {
    /// Log-domain value `L`.
    pub log_value: f64,
    /// Utility value `V = −exp(L)`.
    pub utility: f64,
    /// Static option positions in units of the options (`ℓ = ℓ'/γ`).
    pub ell: Vec<f64>,
    pub fields: ValueFields,
}

/// `φ = −γ ξ` for a per-node endowment.
pub fn log_claim(endowment: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    endowment.iter().map(|v| v.iter().map(|x| -gamma * x).collect()).collect()
}

/// Robust utility at fixed static positions `ℓ`.
pub fn robust_value(
    spec: &MarketSpec,
    lift: &LiftedTree,
    endowment: &[Vec<f64>],
    ell: &[f64],
    cfg: &SolverConfig,
) -> Result<RobustValue> {
    let gamma = spec.claims.gamma;
    let scaled: Vec<f64> = ell.iter().map(|l| gamma * l).collect();
    let fields =
        backward_induction(spec, lift, &Payoff::Claim(log_claim(endowment, gamma)), &Statics::Fixed(scaled), cfg)?;
    Ok(RobustValue { log_value: fields.log_value, utility: -fields.log_value.exp(), ell: ell.to_vec(), fields })
}

/// Robust utility with static positions chosen optimally (jointly with the
/// dynamic positions, in one convex program).
pub fn optimize_static(
    spec: &MarketSpec,
    lift: &LiftedTree,
    endowment: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<RobustValue> {
    let gamma = spec.claims.gamma;
    let fields = backward_induction(spec, lift, &Payoff::Claim(log_claim(endowment, gamma)), &Statics::Optimize, cfg)?;
    let ell = fields.ell.iter().map(|l| l / gamma).collect();
    Ok(RobustValue { log_value: fields.log_value, utility: -fields.log_value.exp(), ell, fields })
}
