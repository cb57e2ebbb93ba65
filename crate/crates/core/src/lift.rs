//! Randomization lift: θ-grids, the fictitious price `X = clamp(S·θ, b, a)`
//! and the translation between friction strategies and lifted positions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::MarketSpec;
use crate::tol;

/// Tensor grid on `[1/c, c]^{d-1}`, geometric in each coordinate so that
/// odd resolutions contain θ = 1.
#[derive(Debug, Clone, Serialize)]
pub struct ThetaGrid {
    pub m: usize,
    pub points: Vec<Vec<f64>>,
    /// `interior[node][point]`.
    pub interior: Vec<Vec<bool>>,
}

impl ThetaGrid {
    fn axis(m: usize, c: f64) -> Vec<f64> {
        (0..m).map(|j| c.powf(-1.0 + 2.0 * j as f64 / (m - 1) as f64)).collect()
    }

    /// Multi-index of grid point `p` (first coordinate varies slowest).
    pub fn index(&self, p: usize, dims: usize) -> Vec<usize> {
        let mut idx = vec![0; dims];
        let mut rest = p;
        for i in (0..dims).rev() {
            idx[i] = rest % self.m;
            rest /= self.m;
        }
        idx
    }
}

#[derive(Debug, Clone)]
pub struct LiftedTree {
    pub grid: ThetaGrid,
    /// `x[node][point]`, length `d` with `x[..][..][d-1] = 1`.
    pub x: Vec<Vec<Vec<f64>>>,
    /// Per node, coordinatewise max / min of X over the grid (`a` and `b`).
    pub hi: Vec<Vec<f64>>,
    pub lo: Vec<Vec<f64>>,
    /// Grid points at which every risky coordinate sits at a box endpoint.
    pub corners: Vec<usize>,
    /// `payoff[node][point] = ξ·X` on terminal nodes.
    pub payoff: Vec<Vec<f64>>,
    /// `option_payoff[j][node][point] = ζ_j·X` on terminal nodes.
    pub option_payoff: Vec<Vec<Vec<f64>>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Componentwise projection onto `[b, a]`, numéraire coordinate appended.
pub fn clamp_price(s: &[f64], theta: &[f64], bid: &[f64], ask: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = (0..s.len()).map(|i| (s[i] * theta[i]).clamp(bid[i], ask[i])).collect();
    x.push(1.0);
    x
}

pub fn build_lift(spec: &MarketSpec, m: usize) -> Result<LiftedTree> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("grid resolution must be >= 2, got {m}")));
    }
    let r = spec.cones.risky();
    let c = spec.cones.spread_bound;
    let axis = ThetaGrid::axis(m, c);
    let count = m.pow(r as u32);
    let mut grid = ThetaGrid { m, points: Vec::with_capacity(count), interior: Vec::new() };
    for p in 0..count {
        let idx = grid.index(p, r);
        grid.points.push(idx.iter().map(|&j| axis[j]).collect());
    }
    let corners: Vec<usize> = (0..count).filter(|&p| grid.index(p, r).iter().all(|&j| j == 0 || j == m - 1)).collect();
    let n = spec.tree.len();
    let mut x = Vec::with_capacity(n);
    let mut interior = Vec::with_capacity(n);
    for k in 0..n {
        let (s, b, a) = (&spec.cones.mid[k], &spec.cones.bid[k], &spec.cones.ask[k]);
        let xs: Vec<Vec<f64>> = grid.points.iter().map(|th| clamp_price(s, th, b, a)).collect();
        interior.push(xs.iter().map(|xv| (0..r).all(|i| b[i] == a[i] || (b[i] < xv[i] && xv[i] < a[i]))).collect());
        x.push(xs);
    }
    grid.interior = interior;
    let hi: Vec<Vec<f64>> =
        (0..n).map(|k| (0..r).map(|i| x[k].iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max)).collect()).collect();
    let lo: Vec<Vec<f64>> =
        (0..n).map(|k| (0..r).map(|i| x[k].iter().map(|v| v[i]).fold(f64::INFINITY, f64::min)).collect()).collect();
    let table =
        |claim: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|k| {
                    if spec.tree.is_terminal(k) {
                        x[k].iter().map(|xv| dot(&claim[k], xv)).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
    let payoff = table(&spec.claims.endowment);
    let option_payoff = spec.claims.options.iter().map(|o| table(&o.payoff)).collect();
    Ok(LiftedTree { grid, x, hi, lo, corners, payoff, option_payoff })
}

impl LiftedTree {
    pub fn points(&self) -> usize {
        self.grid.points.len()
    }

    pub fn risky(&self) -> usize {
        self.hi.first().map_or(0, |h| h.len())
    }

    /// Every assignment of one grid point per node along the root-to-`leaf`
    /// path, in lexicographic order.
    pub fn theta_paths(&self, spec: &MarketSpec, leaf: usize) -> Vec<Vec<usize>> {
        let len = spec.tree.nodes[leaf].t + 1;
        let p = self.points();
        let total = p.pow(len as u32);
        (0..total)
            .map(|mut code| {
                let mut v = vec![0; len];
                for slot in (0..len).rev() {
                    v[slot] = code % p;
                    code /= p;
                }
                v
            })
            .collect()
    }

    /// `g + (H∘X)_T` along a θ-path ending at `leaf`, for an arbitrary claim.
    pub fn hedged_value(
        &self,
        spec: &MarketSpec,
        h: &[Vec<f64>],
        claim: &[Vec<f64>],
        leaf: usize,
        thetas: &[usize],
    ) -> f64 {
        let path = spec.tree.path(leaf);
        let r = self.risky();
        let xs: Vec<&Vec<f64>> = path.iter().zip(thetas).map(|(&k, &p)| &self.x[k][p]).collect();
        let mut v = dot(&claim[leaf], xs[xs.len() - 1]);
        for s in 0..path.len() - 1 {
            let hs = &h[path[s]];
            for i in 0..r {
                v += hs[i] * (xs[s + 1][i] - xs[s][i]);
            }
        }
        v
    }
}

/// Semi-static strategy: positions `h[node]` (length d) for internal nodes,
/// held from that node to its children, and static option positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    pub h: Vec<Vec<f64>>,
    pub ell: Vec<f64>,
}

impl Strategy {
    pub fn zero(spec: &MarketSpec) -> Self {
        let d = spec.d();
        let h =
            (0..spec.tree.len()).map(|k| if spec.tree.is_terminal(k) { Vec::new() } else { vec![0.0; d] }).collect();
        Self { h, ell: vec![0.0; spec.num_options()] }
    }

    /// Position held into `node` (zero at the root).
    pub fn held_into(&self, spec: &MarketSpec, node: usize) -> Vec<f64> {
        match spec.tree.nodes[node].parent {
            Some(p) => self.h[p].clone(),
            None => vec![0.0; spec.d()],
        }
    }
}

/// Terminal claim `ξ + Σ ℓ_j ζ_j − Σ |ℓ_j| c_j e_d`.
pub fn effective_endowment(spec: &MarketSpec, ell: &[f64]) -> Vec<Vec<f64>> {
    let d = spec.d();
    let cost: f64 = ell.iter().zip(&spec.claims.options).map(|(l, o)| l.abs() * o.cost).sum();
    (0..spec.tree.len())
        .map(|k| {
            if !spec.tree.is_terminal(k) {
                return Vec::new();
            }
            let mut v = spec.claims.endowment[k].clone();
            for (l, o) in ell.iter().zip(&spec.claims.options) {
                for i in 0..d {
                    v[i] += l * o.payoff[k][i];
                }
            }
            v[d - 1] -= cost;
            v
        })
        .collect()
}

/// Cheapest numéraire leg of a risky trade: buy at the ask, sell at the bid.
pub fn numeraire_leg(risky: &[f64], bid: &[f64], ask: &[f64]) -> f64 {
    (0..risky.len()).map(|i| -risky[i].max(0.0) * ask[i] + (-risky[i]).max(0.0) * bid[i]).sum()
}

/// `max_{Z ∈ box×{1}} η·Z`; `η ∈ −K` iff this is `<= 0`.
pub fn solvency_excess(eta: &[f64], bid: &[f64], ask: &[f64]) -> f64 {
    let r = bid.len();
    eta[r] + (0..r).map(|i| eta[i].max(0.0) * ask[i] - (-eta[i]).max(0.0) * bid[i]).sum::<f64>()
}

#[derive(Debug, Clone, Serialize)]
pub struct Transfers {
    /// `eta[node]`, length d, on every node.
    pub eta: Vec<Vec<f64>>,
}

impl Transfers {
    /// `(claim + Σ_t η_t)^d` at `leaf`.
    pub fn liquidated_wealth(&self, spec: &MarketSpec, claim: &[Vec<f64>], leaf: usize) -> f64 {
        let d = spec.d();
        claim[leaf][d - 1] + spec.tree.path(leaf).iter().map(|&k| self.eta[k][d - 1]).sum::<f64>()
    }
}

/// Transfers implementing the lifted positions `h` against `claim`, with
/// full liquidation of every risky holding at the terminal date.
pub fn transfers_for_claim(spec: &MarketSpec, h: &[Vec<f64>], claim: &[Vec<f64>]) -> Transfers {
    let r = spec.cones.risky();
    let eta = (0..spec.tree.len())
        .map(|k| {
            let prev = match spec.tree.nodes[k].parent {
                Some(p) => h[p][..r].to_vec(),
                None => vec![0.0; r],
            };
            let mut e: Vec<f64> = if spec.tree.is_terminal(k) {
                (0..r).map(|i| -claim[k][i] - prev[i]).collect()
            } else {
                (0..r).map(|i| h[k][i] - prev[i]).collect()
            };
            e.push(numeraire_leg(&e, &spec.cones.bid[k], &spec.cones.ask[k]));
            e
        })
        .collect();
    Transfers { eta }
}

/// Transfers for a semi-static strategy against the market's endowment.
pub fn strategy_to_transfers(spec: &MarketSpec, strategy: &Strategy) -> Transfers {
    transfers_for_claim(spec, &strategy.h, &effective_endowment(spec, &strategy.ell))
}

/// Largest violation of `min over θ-paths [g + (H∘X)_T] >= liquidated wealth`.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceCertificate {
    pub worst_margin: f64,
    pub paths_checked: usize,
}

/// Recovers positions from admissible transfers: `H(n) = Σ η` along the path
/// to `n`, and certifies on every θ-path that the lifted hedged claim
/// dominates the liquidated transfer wealth.
pub fn transfers_to_strategy(
    spec: &MarketSpec,
    lift: &LiftedTree,
    transfers: &Transfers,
    claim: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, DominanceCertificate)> {
    let d = spec.d();
    let r = d - 1;
    for k in 0..spec.tree.len() {
        let e = &transfers.eta[k];
        if e.len() != d {
            return Err(Error::Dimension(format!(
                "transfer at node `{}` has {} entries",
                spec.tree.nodes[k].id,
                e.len()
            )));
        }
        let excess = solvency_excess(e, &spec.cones.bid[k], &spec.cones.ask[k]);
        if excess > tol::CLAMP * (1.0 + e.iter().map(|v| v.abs()).sum::<f64>()) {
            return Err(Error::InvalidArgument(format!(
                "transfer at node `{}` is not in -K (excess {excess:e})",
                spec.tree.nodes[k].id
            )));
        }
    }
    let mut h = vec![Vec::new(); spec.tree.len()];
    for k in 0..spec.tree.len() {
        let mut cum = match spec.tree.nodes[k].parent {
            Some(p) => h[p].clone(),
            None => vec![0.0; d],
        };
        if spec.tree.is_terminal(k) {
            let resid: Vec<f64> = (0..r).map(|i| claim[k][i] + cum[i] + transfers.eta[k][i]).collect();
            if resid.iter().any(|v| v.abs() > 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "terminal position at node `{}` is not liquidated",
                    spec.tree.nodes[k].id
                )));
            }
            continue;
        }
        for i in 0..d {
            cum[i] += transfers.eta[k][i];
        }
        // Parents precede children in storage order, so `h[p]` is ready.
        h[k] = cum;
    }
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    for leaf in spec.tree.terminals() {
        let wealth = transfers.liquidated_wealth(spec, claim, leaf);
        for thetas in lift.theta_paths(spec, leaf) {
            let v = lift.hedged_value(spec, &h, claim, leaf, &thetas);
            worst = worst.min(v - wealth);
            checked += 1;
        }
    }
    Ok((h, DominanceCertificate { worst_margin: worst, paths_checked: checked }))
}

#[derive(Serialize)]
struct LiftNodeDump<'a> {
    id: &'a str,
    t: usize,
    x: &'a [Vec<f64>],
    interior: &'a [bool],
    payoff: &'a [f64],
}

#[derive(Serialize)]
struct LiftDump<'a> {
    m: usize,
    theta: &'a [Vec<f64>],
    nodes: Vec<LiftNodeDump<'a>>,
}

pub fn dump_lift_json(spec: &MarketSpec, lift: &LiftedTree) -> serde_json::Value {
    let nodes = (0..spec.tree.len())
        .map(|k| LiftNodeDump {
            id: &spec.tree.nodes[k].id,
            t: spec.tree.nodes[k].t,
            x: &lift.x[k],
            interior: &lift.grid.interior[k],
            payoff: &lift.payoff[k],
        })
        .collect();
    serde_json::to_value(LiftDump { m: lift.grid.m, theta: &lift.grid.points, nodes }).expect("serializable")
}
