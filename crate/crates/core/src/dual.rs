//! Martingale measures on the lifted tree, the entropy-penalized dual
//! objective, and consistent price systems.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::lift::LiftedTree;
use crate::market::MarketSpec;
use crate::primal::{Payoff, ValueFields};
use crate::solvers::{kl_divergence, kl_project_from, LinearProgram, LpStatus, Relation, SolverConfig};

const KL_MAX_ITER: usize = 20_000;

/// A price point carried by a lifted node; `point` is its grid index when
/// the point lies on the θ-grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Atom {
    pub x: Vec<f64>,
    pub point: Option<usize>,
}

/// Measure on the lifted tree given by conditionals: from atom `a` of node
/// `n`, `cond[n][a][j][b]` is the probability of moving to atom `b` of the
/// `j`-th child.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleMeasure {
    pub atoms: Vec<Vec<Atom>>,
    pub root: Vec<f64>,
    pub cond: Vec<Vec<Vec<Vec<f64>>>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MartingaleMeasure {
    /// Probability of each (node, atom).
    pub fn weights(&self, spec: &MarketSpec) -> Vec<Vec<f64>> {
        let mut w: Vec<Vec<f64>> = self.atoms.iter().map(|a| vec![0.0; a.len()]).collect();
        w[0] = self.root.clone();
        for n in 0..spec.tree.len() {
            if spec.tree.is_terminal(n) {
                continue;
            }
            for a in 0..self.atoms[n].len() {
                let wa = w[n][a];
                if wa == 0.0 || self.cond[n].is_empty() {
                    continue;
                }
                for (j, &c) in spec.tree.children(n).iter().enumerate() {
                    for (b, &p) in self.cond[n][a][j].iter().enumerate() {
                        w[c][b] += wa * p;
                    }
                }
            }
        }
        w
    }

    /// Base-space node probabilities.
    pub fn node_mass(&self, spec: &MarketSpec) -> Vec<f64> {
        self.weights(spec).iter().map(|w| w.iter().sum()).collect()
    }

    /// Largest mass defect of a conditional or of the root distribution.
    pub fn mass_residual(&self, spec: &MarketSpec) -> f64 {
        let mut worst = (self.root.iter().sum::<f64>() - 1.0).abs();
        let w = self.weights(spec);
        for n in spec.tree.internal() {
            for a in 0..self.atoms[n].len() {
                if w[n][a] <= 0.0 {
                    continue;
                }
                let s: f64 = self.cond[n][a].iter().flatten().sum();
                worst = worst.max((s - 1.0).abs());
                if self.cond[n][a].iter().flatten().any(|&p| p < 0.0) {
                    worst = worst.max(1.0);
                }
            }
        }
        worst
    }

    /// Largest `|E[X_child | node, atom] − X(node, atom)|` over charged
    /// lifted nodes.
    pub fn martingale_residual(&self, spec: &MarketSpec) -> f64 {
        let w = self.weights(spec);
        let mut worst = 0.0f64;
        for n in spec.tree.internal() {
            for a in 0..self.atoms[n].len() {
                if w[n][a] <= 0.0 {
                    continue;
                }
                for i in 0..spec.d() {
                    let mut e = 0.0;
                    for (j, &c) in spec.tree.children(n).iter().enumerate() {
                        for (b, &p) in self.cond[n][a][j].iter().enumerate() {
                            e += p * self.atoms[c][b].x[i];
                        }
                    }
                    worst = worst.max((e - self.atoms[n][a].x[i]).abs());
                }
            }
        }
        worst
    }

    /// Largest distance of a charged atom outside its node's bid-ask box.
    pub fn box_violation(&self, spec: &MarketSpec) -> f64 {
        let w = self.weights(spec);
        let mut worst = 0.0f64;
        for n in 0..spec.tree.len() {
            for (a, atom) in self.atoms[n].iter().enumerate() {
                if w[n][a] <= 0.0 {
                    continue;
                }
                for i in 0..spec.cones.risky() {
                    worst = worst.max(spec.cones.bid[n][i] - atom.x[i]).max(atom.x[i] - spec.cones.ask[n][i]);
                }
            }
        }
        worst
    }

    /// Whether the measure charges a child that every prior extreme leaves
    /// uncharged.
    pub fn absolutely_continuous(&self, spec: &MarketSpec) -> bool {
        let w = self.weights(spec);
        (0..spec.tree.len()).all(|n| w[n].iter().sum::<f64>() <= 0.0 || spec.charged[n])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyResult {
    pub value: f64,
    /// Weighted KL contribution of each market node (summed over atoms).
    pub per_node: Vec<f64>,
    /// Projection weights per (node, atom).
    pub weights: Vec<Vec<Vec<f64>>>,
}

fn child_marginal(spec: &MarketSpec, m: &MartingaleMeasure, n: usize, a: usize) -> Vec<f64> {
    (0..spec.tree.children(n).len()).map(|j| m.cond[n][a][j].iter().sum()).collect()
}

/// `E(Q̄, P̄)`: each charged lifted node contributes its weight times the KL
/// projection of its child marginal onto the prior hull; the θ part of the
/// conditionals costs nothing.
pub fn robust_entropy(
    spec: &MarketSpec,
    measure: &MartingaleMeasure,
    cfg: &SolverConfig,
    warm: Option<&[Vec<f64>]>,
) -> EntropyResult {
    let w = measure.weights(spec);
    let mut value = 0.0;
    let mut per_node = vec![0.0; spec.tree.len()];
    let mut weights = vec![Vec::new(); spec.tree.len()];
    for n in spec.tree.internal() {
        weights[n] = vec![Vec::new(); measure.atoms[n].len()];
        for a in 0..measure.atoms[n].len() {
            if w[n][a] <= 0.0 {
                continue;
            }
            let q = child_marginal(spec, measure, n, a);
            let start = warm
                .and_then(|ws| ws.get(n))
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().map(|x| x.max(1e-9)).collect::<Vec<f64>>());
            let proj = kl_project_from(&q, &spec.priors.extremes[n], start.as_deref(), cfg.kl_tol, KL_MAX_ITER);
            let contrib = if proj.value.is_infinite() { f64::INFINITY } else { w[n][a] * proj.value };
            per_node[n] += contrib;
            value += contrib;
            weights[n][a] = proj.weights;
        }
    }
    EntropyResult { value, per_node, weights }
}

/// Static-option data for the dual feasibility test `|E[ζ_j·X_T]| <= c_j`.
fn option_feasible(spec: &MarketSpec, measure: &MartingaleMeasure, w: &[Vec<f64>]) -> bool {
    spec.claims.options.iter().all(|o| {
        let e: f64 = spec
            .tree
            .terminals()
            .map(|k| measure.atoms[k].iter().zip(&w[k]).map(|(atom, wa)| wa * dot(&o.payoff[k], &atom.x)).sum::<f64>())
            .sum();
        e.abs() <= o.cost * (1.0 + 1e-12)
    })
}

/// Expected terminal payoff under the measure.
pub fn expected_payoff(spec: &MarketSpec, measure: &MartingaleMeasure, payoff: &Payoff) -> f64 {
    let w = measure.weights(spec);
    spec.tree
        .terminals()
        .map(|k| {
            measure.atoms[k]
                .iter()
                .zip(&w[k])
                .filter(|(_, &wa)| wa > 0.0)
                .map(|(atom, wa)| {
                    wa * match payoff {
                        Payoff::Claim(phi) => dot(&phi[k], &atom.x),
                        Payoff::Table(t) => t[k][atom.point.expect("table payoffs need grid atoms")],
                    }
                })
                .sum::<f64>()
        })
        .sum()
}

/// `E^Q̄[g̃] − E(Q̄, P̄)`, or −∞ when the measure prices some static option
/// outside its cost band or charges a prior-null node.
pub fn dual_objective(
    spec: &MarketSpec,
    measure: &MartingaleMeasure,
    payoff: &Payoff,
    cfg: &SolverConfig,
    warm: Option<&[Vec<f64>]>,
) -> f64 {
    let w = measure.weights(spec);
    if !option_feasible(spec, measure, &w) {
        return f64::NEG_INFINITY;
    }
    let ent = robust_entropy(spec, measure, cfg, warm);
    if ent.value.is_infinite() {
        return f64::NEG_INFINITY;
    }
    expected_payoff(spec, measure, payoff) - ent.value
}

/// Lifts a base measure and price system with point-mass θ-kernels (one atom
/// per node at `Z`); `leaf_atoms` optionally spreads leaves over grid points.
pub fn lift_cps(
    spec: &MarketSpec,
    lift: &LiftedTree,
    cond: &[Vec<f64>],
    z: &[Vec<f64>],
    leaf_atoms: Option<&[Vec<(usize, f64)>]>,
) -> MartingaleMeasure {
    let nn = spec.tree.len();
    let mut atoms = vec![Vec::new(); nn];
    for k in 0..nn {
        match leaf_atoms.map(|l| &l[k]) {
            Some(la) if !la.is_empty() => {
                atoms[k] = la.iter().map(|&(p, _)| Atom { x: lift.x[k][p].clone(), point: Some(p) }).collect();
            }
            _ => {
                let x = if z[k].is_empty() { lift.x[k][0].clone() } else { z[k].clone() };
                atoms[k] = vec![Atom { x, point: None }];
            }
        }
    }
    let mut mcond = vec![Vec::new(); nn];
    for k in spec.tree.internal() {
        let kids = spec.tree.children(k);
        let row: Vec<Vec<f64>> = kids
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let qc = cond[k].get(j).copied().unwrap_or(0.0);
                match leaf_atoms.map(|l| &l[c]) {
                    Some(la) if !la.is_empty() => la.iter().map(|&(_, w)| qc * w).collect(),
                    _ => vec![qc],
                }
            })
            .collect();
        mcond[k] = vec![row];
    }
    MartingaleMeasure { atoms, root: vec![1.0], cond: mcond }
}

/// Measure built from the primal multipliers: at every node the conditional
/// is a mixture of prior extremes exponentially tilted by the continuation
/// values, and prices sit at the multiplier-weighted box points `Z`.
pub fn gibbs_candidate(spec: &MarketSpec, lift: &LiftedTree, fields: &ValueFields) -> MartingaleMeasure {
    let leaf = if fields.claim.is_none() { Some(fields.dual.leaf_atoms.as_slice()) } else { None };
    lift_cps(spec, lift, &fields.dual.cond, &fields.dual.z, leaf)
}

#[derive(Debug, Clone, Serialize)]
pub struct CpsPair {
    /// Conditional base measure per internal node.
    pub cond: Vec<Vec<f64>>,
    /// Path probabilities.
    pub mass: Vec<f64>,
    /// `Z = E^Q̄[X | node]`.
    pub z: Vec<Vec<f64>>,
    /// `E(Q, P)` on the base space.
    pub base_entropy: f64,
    /// Smallest distance from `Z` to a box endpoint over charged frictional
    /// coordinates (0 means boundary contact).
    pub boundary_distance: f64,
}

impl CpsPair {
    pub fn martingale_residual(&self, spec: &MarketSpec) -> f64 {
        let mut worst = 0.0f64;
        for n in spec.tree.internal() {
            if self.mass[n] <= 0.0 {
                continue;
            }
            for i in 0..spec.d() {
                let e: f64 = spec.tree.children(n).iter().zip(&self.cond[n]).map(|(&c, q)| q * self.z[c][i]).sum();
                worst = worst.max((e - self.z[n][i]).abs());
            }
        }
        worst
    }
}

/// Projects a lifted measure to the base space: `Q` is the ω-marginal and
/// `Z` the conditional mean of `X` given the market node.
pub fn extract_cps(spec: &MarketSpec, measure: &MartingaleMeasure, cfg: &SolverConfig) -> CpsPair {
    let w = measure.weights(spec);
    let nn = spec.tree.len();
    let d = spec.d();
    let mass: Vec<f64> = w.iter().map(|v| v.iter().sum()).collect();
    let mut z = vec![vec![f64::NAN; d]; nn];
    for k in 0..nn {
        if mass[k] > 0.0 {
            z[k] = (0..d)
                .map(|i| measure.atoms[k].iter().zip(&w[k]).map(|(a, wa)| wa * a.x[i]).sum::<f64>() / mass[k])
                .collect();
        }
    }
    let mut cond = vec![Vec::new(); nn];
    let mut base_entropy = 0.0;
    for k in spec.tree.internal() {
        let kids = spec.tree.children(k);
        cond[k] = if mass[k] > 0.0 {
            kids.iter().map(|&c| mass[c] / mass[k]).collect()
        } else {
            vec![1.0 / kids.len() as f64; kids.len()]
        };
        if mass[k] > 0.0 {
            let p = kl_project_from(&cond[k], &spec.priors.extremes[k], None, cfg.kl_tol, KL_MAX_ITER);
            base_entropy += mass[k] * p.value;
        }
    }
    let mut boundary_distance = f64::INFINITY;
    for k in 0..nn {
        if mass[k] <= 0.0 {
            continue;
        }
        for i in 0..d - 1 {
            let (b, a) = (spec.cones.bid[k][i], spec.cones.ask[k][i]);
            if b < a {
                boundary_distance = boundary_distance.min((z[k][i] - b).min(a - z[k][i]));
            }
        }
    }
    CpsPair { cond, mass, z, base_entropy, boundary_distance }
}

/// Makes `Z` an exact martingale under `cond` by taking conditional
/// expectations of the leaf prices backwards.
fn repair_martingale(spec: &MarketSpec, cond: &[Vec<f64>], z: &mut [Vec<f64>]) {
    for k in (0..spec.tree.len()).rev() {
        if spec.tree.is_terminal(k) || cond[k].is_empty() {
            continue;
        }
        let kids = spec.tree.children(k);
        for i in 0..spec.cones.risky() {
            let mut e = 0.0;
            for (j, &c) in kids.iter().enumerate() {
                if cond[k][j] > 0.0 {
                    e += cond[k][j] * z[c][i];
                }
            }
            z[k][i] = e;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AscentResult {
    pub measure: MartingaleMeasure,
    pub objective: f64,
    pub iterations: usize,
}

/// Augmented-Lagrangian ascent over base conditionals and price systems for
/// claim payoffs without static options, started from `start`.
///
/// Each round maximizes, in turn, the path measure (entropic mirror step on
/// leaf weights against the current prior mixture), the mixture weights (KL
/// projection) and every `Z` coordinate (closed form, clipped to its box),
/// then updates the martingale multipliers. Only measures whose martingale
/// repair stays inside the boxes are scored.
pub fn dual_ascent(
    spec: &MarketSpec,
    lift: &LiftedTree,
    phi: &[Vec<f64>],
    start: (&[Vec<f64>], &[Vec<f64>]),
    cfg: &SolverConfig,
    rounds: usize,
) -> AscentResult {
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    let claim = Payoff::Claim(phi.to_vec());
    let mut cond: Vec<Vec<f64>> = start.0.to_vec();
    let mut z: Vec<Vec<f64>> = start.1.to_vec();
    for k in 0..nn {
        if z[k].is_empty() {
            let mut v = spec.cones.mid[k].clone();
            v.push(1.0);
            z[k] = v;
        }
        if !spec.tree.is_terminal(k) && cond[k].is_empty() {
            let kids = spec.tree.children(k).len();
            cond[k] = vec![1.0 / kids as f64; kids];
        }
    }
    let leaves: Vec<usize> = spec.tree.terminals().filter(|&k| spec.charged[k]).collect();
    let score = |cond: &[Vec<f64>], z: &[Vec<f64>]| -> Option<(f64, MartingaleMeasure)> {
        let mut zz = z.to_vec();
        repair_martingale(spec, cond, &mut zz);
        let m = lift_cps(spec, lift, cond, &zz, None);
        if m.box_violation(spec) > 0.0 {
            return None;
        }
        let v = dual_objective(spec, &m, &claim, cfg, None);
        Some((v, m))
    };
    let mut best = score(&cond, &z);
    let mut nu = vec![vec![0.0; r]; nn];
    let mut rho = 1.0;
    let mut mix: Vec<Vec<f64>> = (0..nn)
        .map(|k| {
            if spec.tree.is_terminal(k) {
                Vec::new()
            } else {
                let e = spec.priors.extremes[k].len();
                vec![1.0 / e as f64; e]
            }
        })
        .collect();
    let mut it = 0;
    let mut last = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
    for round in 0..rounds {
        it = round + 1;
        let mass = path_mass(spec, &cond);
        // Mixture weights: project each conditional onto the prior hull.
        for k in spec.tree.internal() {
            if mass[k] > 0.0 {
                let start: Vec<f64> = mix[k].iter().map(|v| v.max(1e-9)).collect();
                mix[k] = kl_project_from(&cond[k], &spec.priors.extremes[k], Some(&start), cfg.kl_tol, 200).weights;
            }
        }
        // Path measure: Q ∝ P_λ · exp(G) with G the linearized payoff and
        // penalty, damped by a half step in the mirror geometry.
        let resid = residuals(spec, &cond, &z, &mass);
        let mut grad = vec![0.0; nn];
        for &leaf in &leaves {
            grad[leaf] = dot(&phi[leaf], &z[leaf]);
        }
        for k in spec.tree.internal() {
            if mass[k] <= 0.0 {
                continue;
            }
            let mult: Vec<f64> = (0..r).map(|i| nu[k][i] + rho * resid[k][i]).collect();
            // ∂r_k/∂Q(c) = Z(c), ∂r_k/∂Q(k) = −Z(k); spread to the leaves below.
            let own = -dot(&mult, &z[k][..r]);
            for &c in spec.tree.children(k) {
                let g = -dot(&mult, &z[c][..r]);
                for leaf in spec.tree.subtree(c) {
                    if spec.tree.is_terminal(leaf) {
                        grad[leaf] += g;
                    }
                }
            }
            for leaf in spec.tree.subtree(k) {
                if spec.tree.is_terminal(leaf) {
                    grad[leaf] += own;
                }
            }
        }
        let prior = prior_path(spec, &mix);
        let leaf_q = leaf_mass(spec, &cond);
        let eta = 0.5;
        let mut logw: Vec<(usize, f64)> = leaves
            .iter()
            .filter(|&&l| prior[l] > 0.0)
            .map(|&l| {
                let cur = leaf_q[l].max(1e-300).ln();
                (l, (1.0 - eta) * cur + eta * (prior[l].ln() + grad[l]))
            })
            .collect();
        let mx = logw.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let tot: f64 = logw.iter().map(|v| (v.1 - mx).exp()).sum();
        for v in logw.iter_mut() {
            v.1 = (v.1 - mx).exp() / tot;
        }
        let mut new_leaf = vec![0.0; nn];
        for (l, v) in logw {
            new_leaf[l] = v;
        }
        cond = conditionals_from_leaves(spec, &new_leaf);
        let mass = path_mass(spec, &cond);
        // Prices: exact coordinate maximization of the augmented Lagrangian.
        for k in (0..nn).rev() {
            if mass[k] <= 0.0 {
                continue;
            }
            for i in 0..r {
                let (lo, hi) = (spec.cones.bid[k][i], spec.cones.ask[k][i]);
                // Linear coefficient a·Z and curvature from the two residuals
                // containing Z(k): r_k (coefficient −Q(k)) and r_parent (+Q(k)).
                let mut a = if spec.tree.is_terminal(k) { mass[k] * phi[k][i] } else { 0.0 };
                let mut curv = 0.0;
                let mut target = 0.0;
                let qk = mass[k];
                if !spec.tree.is_terminal(k) {
                    let others: f64 = spec.tree.children(k).iter().map(|&c| mass[c] * z[c][i]).sum();
                    a += nu[k][i] * qk;
                    curv += rho * qk * qk;
                    target += rho * qk * others;
                }
                if let Some(p) = spec.tree.nodes[k].parent {
                    let others: f64 =
                        spec.tree.children(p).iter().filter(|&&c| c != k).map(|&c| mass[c] * z[c][i]).sum::<f64>()
                            - mass[p] * z[p][i];
                    a -= nu[p][i] * qk;
                    curv += rho * qk * qk;
                    target -= rho * qk * others;
                }
                z[k][i] = if curv > 0.0 {
                    ((a + target) / curv).clamp(lo, hi)
                } else if a > 0.0 {
                    hi
                } else {
                    lo
                };
            }
        }
        let resid = residuals(spec, &cond, &z, &mass);
        let mut rnorm = 0.0f64;
        for k in spec.tree.internal() {
            for i in 0..r {
                nu[k][i] += rho * resid[k][i];
                rnorm = rnorm.max(resid[k][i].abs());
            }
        }
        if round % 20 == 19 {
            rho = (rho * 2.0).min(1e6);
        }
        if let Some((v, m)) = score(&cond, &z) {
            if best.as_ref().map_or(true, |b| v > b.0) {
                best = Some((v, m));
            }
        }
        let cur = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        if round > 50 && (cur - last).abs() < 1e-12 && rnorm < 1e-10 {
            break;
        }
        last = cur;
    }
    let (objective, measure) = best.unwrap_or_else(|| {
        let m = lift_cps(spec, lift, &cond, &z, None);
        (f64::NEG_INFINITY, m)
    });
    AscentResult { measure, objective, iterations: it }
}

fn path_mass(spec: &MarketSpec, cond: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; spec.tree.len()];
    m[0] = 1.0;
    for k in 0..spec.tree.len() {
        if spec.tree.is_terminal(k) {
            continue;
        }
        for (j, &c) in spec.tree.children(k).iter().enumerate() {
            m[c] = m[k] * cond[k][j];
        }
    }
    m
}

fn leaf_mass(spec: &MarketSpec, cond: &[Vec<f64>]) -> Vec<f64> {
    path_mass(spec, cond)
}

fn prior_path(spec: &MarketSpec, mix: &[Vec<f64>]) -> Vec<f64> {
    let cond: Vec<Vec<f64>> = (0..spec.tree.len())
        .map(|k| {
            if spec.tree.is_terminal(k) {
                return Vec::new();
            }
            let n = spec.tree.children(k).len();
            (0..n).map(|j| spec.priors.extremes[k].iter().zip(&mix[k]).map(|(p, w)| w * p[j]).sum()).collect()
        })
        .collect();
    path_mass(spec, &cond)
}

fn conditionals_from_leaves(spec: &MarketSpec, leaf: &[f64]) -> Vec<Vec<f64>> {
    let nn = spec.tree.len();
    let mut mass = leaf.to_vec();
    for k in (0..nn).rev() {
        if !spec.tree.is_terminal(k) {
            mass[k] = spec.tree.children(k).iter().map(|&c| mass[c]).sum();
        }
    }
    (0..nn)
        .map(|k| {
            if spec.tree.is_terminal(k) {
                return Vec::new();
            }
            let kids = spec.tree.children(k);
            if mass[k] > 0.0 {
                kids.iter().map(|&c| mass[c] / mass[k]).collect()
            } else {
                vec![1.0 / kids.len() as f64; kids.len()]
            }
        })
        .collect()
}

fn residuals(spec: &MarketSpec, _cond: &[Vec<f64>], z: &[Vec<f64>], mass: &[f64]) -> Vec<Vec<f64>> {
    let r = spec.cones.risky();
    (0..spec.tree.len())
        .map(|k| {
            if spec.tree.is_terminal(k) {
                return vec![0.0; r];
            }
            (0..r)
                .map(|i| spec.tree.children(k).iter().map(|&c| mass[c] * z[c][i]).sum::<f64>() - mass[k] * z[k][i])
                .collect()
        })
        .collect()
}

/// Pool of extreme one-step martingale conditionals per lifted node, used to
/// sample feasible measures.
pub struct MeasureSampler {
    viable: Vec<Vec<bool>>,
    pool: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

impl MeasureSampler {
    /// Builds, bottom-up, the set of lifted nodes from which a martingale
    /// continuation over charged children exists, with `per_node` random
    /// LP vertex conditionals for each.
    pub fn new(spec: &MarketSpec, lift: &LiftedTree, rng: &mut ChaCha8Rng, per_node: usize) -> Self {
        let nn = spec.tree.len();
        let pts = lift.points();
        let r = spec.cones.risky();
        let mut viable = vec![vec![false; pts]; nn];
        let mut pool = vec![vec![Vec::new(); pts]; nn];
        for k in (0..nn).rev() {
            if !spec.charged[k] {
                continue;
            }
            if spec.tree.is_terminal(k) {
                viable[k] = vec![true; pts];
                continue;
            }
            let kids = spec.tree.children(k).to_vec();
            for p in 0..pts {
                for _ in 0..per_node {
                    let mut lp = LinearProgram::maximize();
                    let mut vars = Vec::new();
                    for (j, &c) in kids.iter().enumerate() {
                        for b in 0..pts {
                            if spec.charged[c] && viable[c][b] {
                                let v = lp.nonneg();
                                lp.set_objective(v, rng.gen_range(-1.0..1.0));
                                vars.push((j, b, v));
                            }
                        }
                    }
                    lp.constraint(vars.iter().map(|&(_, _, v)| (v, 1.0)).collect(), Relation::Eq, 1.0);
                    for i in 0..r {
                        let row = vars.iter().map(|&(j, b, v)| (v, lift.x[kids[j]][b][i])).collect();
                        lp.constraint(row, Relation::Eq, lift.x[k][p][i]);
                    }
                    let Ok(sol) = lp.solve(1e-10) else { break };
                    if sol.status != LpStatus::Optimal {
                        break;
                    }
                    let mut c = vec![vec![0.0; pts]; kids.len()];
                    for &(j, b, v) in &vars {
                        c[j][b] = sol.value(v).max(0.0);
                    }
                    pool[k][p].push(c);
                }
                viable[k][p] = !pool[k][p].is_empty();
            }
        }
        Self { viable, pool }
    }

    /// Random feasible measure: random root distribution over viable grid
    /// points and random convex combinations of pooled conditionals.
    pub fn sample(&self, spec: &MarketSpec, lift: &LiftedTree, rng: &mut ChaCha8Rng) -> MartingaleMeasure {
        let nn = spec.tree.len();
        let pts = lift.points();
        let atoms: Vec<Vec<Atom>> =
            (0..nn).map(|k| (0..pts).map(|p| Atom { x: lift.x[k][p].clone(), point: Some(p) }).collect()).collect();
        let mut root: Vec<f64> =
            (0..pts).map(|p| if self.viable[0][p] && rng.gen_bool(0.5) { rng.gen::<f64>() } else { 0.0 }).collect();
        if root.iter().sum::<f64>() <= 0.0 {
            let mut viable: Vec<usize> = (0..pts).filter(|&p| self.viable[0][p]).collect();
            viable.shuffle(rng);
            root[viable[0]] = 1.0;
        }
        let s: f64 = root.iter().sum();
        for v in root.iter_mut() {
            *v /= s;
        }
        let mut cond = vec![Vec::new(); nn];
        for k in spec.tree.internal() {
            let kids = spec.tree.children(k).len();
            cond[k] = (0..pts)
                .map(|p| {
                    let pool = &self.pool[k][p];
                    if pool.is_empty() {
                        return vec![vec![0.0; pts]; kids];
                    }
                    let w: Vec<f64> = (0..pool.len()).map(|_| rng.gen::<f64>() + 1e-3).collect();
                    let tw: f64 = w.iter().sum();
                    let mut c = vec![vec![0.0; pts]; kids];
                    for (wi, v) in w.iter().zip(pool) {
                        for j in 0..kids {
                            for b in 0..pts {
                                c[j][b] += wi / tw * v[j][b];
                            }
                        }
                    }
                    c
                })
                .collect();
        }
        MartingaleMeasure { atoms, root, cond }
    }
}

/// KL divergence of the base path measure of `measure` from a single prior
/// chain built from one extreme per node; an upper bound on the entropy.
pub fn entropy_upper_bound(spec: &MarketSpec, cps: &CpsPair, pick: &[usize]) -> f64 {
    let mut total = 0.0;
    for k in spec.tree.internal() {
        if cps.mass[k] > 0.0 {
            total += cps.mass[k] * kl_divergence(&cps.cond[k], &spec.priors.extremes[k][pick[k]]);
        }
    }
    total
}

/// Nearest exact consistent price system to a point-mass candidate.
///
/// Works in flow form (`Q` on leaves, `M = Q·Z` on nodes), where martingale
/// and box constraints are linear: maximizes `E[φ·X_T]` minus the entropy
/// linearized at the candidate, with leaf masses held within a relative
/// trust region `tau` of the candidate's.
pub fn polish_candidate(
    spec: &MarketSpec,
    lift: &LiftedTree,
    cond: &[Vec<f64>],
    mix: &[Vec<f64>],
    phi: &[Vec<f64>],
    tau: f64,
    cfg: &SolverConfig,
) -> Option<MartingaleMeasure> {
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    let mass = path_mass(spec, cond);
    let full_mix: Vec<Vec<f64>> = (0..nn)
        .map(|k| {
            if spec.tree.is_terminal(k) {
                Vec::new()
            } else if mix[k].len() == spec.priors.extremes[k].len() {
                mix[k].clone()
            } else {
                let e = spec.priors.extremes[k].len();
                vec![1.0 / e as f64; e]
            }
        })
        .collect();
    let prior = prior_path(spec, &full_mix);
    let mut lp = LinearProgram::maximize();
    let mut qv = vec![None; nn];
    let mut mv = vec![Vec::new(); nn];
    for k in spec.tree.terminals() {
        if mass[k] > 0.0 && prior[k] > 0.0 {
            let v = lp.var(Some(mass[k] * (1.0 - tau)), Some(mass[k] * (1.0 + tau)));
            let grad = (mass[k] / prior[k]).ln();
            lp.set_objective(v, phi[k][r] - grad);
            qv[k] = Some(v);
        }
    }
    // Node mass as a sum of leaf masses.
    let leaves_below = |k: usize| -> Vec<(crate::solvers::VarId, f64)> {
        spec.tree.subtree(k).into_iter().filter_map(|l| qv[l].map(|v| (v, 1.0))).collect()
    };
    for k in 0..nn {
        let below = leaves_below(k);
        if below.is_empty() {
            continue;
        }
        mv[k] = (0..r).map(|_| lp.free()).collect();
        for i in 0..r {
            if spec.tree.is_terminal(k) {
                lp.set_objective(mv[k][i], phi[k][i]);
            }
            let (lo, hi) = (spec.cones.bid[k][i], spec.cones.ask[k][i]);
            let mut up: Vec<_> = below.iter().map(|&(v, _)| (v, -hi)).collect();
            up.push((mv[k][i], 1.0));
            lp.constraint(up, Relation::Le, 0.0);
            let mut dn: Vec<_> = below.iter().map(|&(v, _)| (v, -lo)).collect();
            dn.push((mv[k][i], 1.0));
            lp.constraint(dn, Relation::Ge, 0.0);
        }
    }
    for k in spec.tree.internal() {
        if mv[k].is_empty() {
            continue;
        }
        for i in 0..r {
            let mut row = vec![(mv[k][i], -1.0)];
            for &c in spec.tree.children(k) {
                if !mv[c].is_empty() {
                    row.push((mv[c][i], 1.0));
                }
            }
            lp.constraint(row, Relation::Eq, 0.0);
        }
    }
    let all: Vec<_> = spec.tree.terminals().filter_map(|k| qv[k].map(|v| (v, 1.0))).collect();
    lp.constraint(all, Relation::Eq, 1.0);
    for o in &spec.claims.options {
        let mut row = Vec::new();
        for k in spec.tree.terminals() {
            if let Some(v) = qv[k] {
                row.push((v, o.payoff[k][r]));
                for i in 0..r {
                    row.push((mv[k][i], o.payoff[k][i]));
                }
            }
        }
        // Slightly inside the band so rebuilding the measure stays feasible.
        let band = o.cost * (1.0 - 1e-9);
        lp.constraint(row.clone(), Relation::Le, band);
        lp.constraint(row, Relation::Ge, -band);
    }
    let sol = lp.solve(cfg.lp_pivot_tol).ok()?;
    if sol.status != LpStatus::Optimal {
        return None;
    }
    let mut leaf = vec![0.0; nn];
    for k in 0..nn {
        if let Some(v) = qv[k] {
            leaf[k] = sol.value(v).max(0.0);
        }
    }
    let new_cond = conditionals_from_leaves(spec, &leaf);
    let node_mass = path_mass(spec, &new_cond);
    let z: Vec<Vec<f64>> = (0..nn)
        .map(|k| {
            if mv[k].is_empty() || node_mass[k] <= 0.0 {
                return Vec::new();
            }
            let mut zk: Vec<f64> = (0..r)
                .map(|i| (sol.value(mv[k][i]) / node_mass[k]).clamp(spec.cones.bid[k][i], spec.cones.ask[k][i]))
                .collect();
            zk.push(1.0);
            zk
        })
        .collect();
    Some(lift_cps(spec, lift, &new_cond, &z, None))
}

/// Best dual candidate for a claim payoff: the raw multiplier measure or its
/// polished versions, whichever scores highest.
pub fn best_candidate(
    spec: &MarketSpec,
    lift: &LiftedTree,
    fields: &ValueFields,
    phi: &[Vec<f64>],
    cfg: &SolverConfig,
) -> (f64, MartingaleMeasure) {
    let payoff = Payoff::Claim(phi.to_vec());
    let raw = gibbs_candidate(spec, lift, fields);
    let score = |m: &MartingaleMeasure| -> f64 {
        if m.martingale_residual(spec) > 1e-9 || m.box_violation(spec) > 1e-12 {
            return f64::NEG_INFINITY;
        }
        dual_objective(spec, m, &payoff, cfg, Some(&fields.dual.mix))
    };
    let mut best = (score(&raw), raw);
    for tau in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1] {
        if let Some(m) = polish_candidate(spec, lift, &fields.dual.cond, &fields.dual.mix, phi, tau, cfg) {
            let v = score(&m);
            if v > best.0 {
                best = (v, m);
            }
        }
    }
    best
}
