//! Indifference and superhedging prices, γ-asymptotics, shortfall and the
//! basic-property suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::{lift_cps, MartingaleMeasure};
use crate::error::{Error, Result};
use crate::lift::LiftedTree;
use crate::market::MarketSpec;
use crate::primal::{backward_induction, Payoff, Statics, ValueFields};
use crate::solvers::{LinearProgram, LpStatus, Relation, SolverConfig, VarId};

/// Terminal claim per node (d-vectors on leaves, empty elsewhere).
pub type Claim = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scaled(claim: &[Vec<f64>], k: f64) -> Claim {
    claim.iter().map(|v| v.iter().map(|x| k * x).collect()).collect()
}

/// `ξ + k·1_d` on the leaves.
pub fn plus_cash(spec: &MarketSpec, claim: &[Vec<f64>], k: f64) -> Claim {
    let d = spec.d();
    let mut out = claim.to_vec();
    for leaf in spec.tree.terminals() {
        if out[leaf].len() == d {
            out[leaf][d - 1] += k;
        }
    }
    out
}

fn combine(a: &[Vec<f64>], b: &[Vec<f64>], wa: f64, wb: f64) -> Claim {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| wa * u + wb * v).collect()).collect()
}

/// Zero claim of the right shape.
pub fn zero_claim(spec: &MarketSpec) -> Claim {
    (0..spec.tree.len()).map(|k| if spec.tree.is_terminal(k) { vec![0.0; spec.d()] } else { Vec::new() }).collect()
}

/// Log-domain value with static options optimized, for payoff `φ·X_T`.
pub fn log_value(spec: &MarketSpec, lift: &LiftedTree, phi: &[Vec<f64>], cfg: &SolverConfig) -> Result<ValueFields> {
    backward_induction(spec, lift, &Payoff::Claim(phi.to_vec()), &Statics::Optimize, cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct IndifferencePrice {
    pub gamma: f64,
    pub price: f64,
    /// `L(γξ)`.
    pub log_claim: f64,
    /// `L(0)`.
    pub log_zero: f64,
    #[serde(skip)]
    pub fields: ValueFields,
}

/// `π_γ(ξ) = (L(γξ) − L(0))/γ` given a precomputed `L(0)`; the zero-claim
/// value does not depend on γ.
pub fn indifference_price_with(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    gamma: f64,
    log_zero: f64,
    cfg: &SolverConfig,
) -> Result<IndifferencePrice> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("risk aversion must be positive, got {gamma}")));
    }
    let fields = log_value(spec, lift, &scaled(claim, gamma), cfg)?;
    Ok(IndifferencePrice {
        gamma,
        price: (fields.log_value - log_zero) / gamma,
        log_claim: fields.log_value,
        log_zero,
        fields,
    })
}

pub fn indifference_price(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    gamma: f64,
    cfg: &SolverConfig,
) -> Result<IndifferencePrice> {
    let zero = log_value(spec, lift, &zero_claim(spec), cfg)?.log_value;
    indifference_price_with(spec, lift, claim, gamma, zero, cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct Superhedge {
    /// Domination form: cheapest semi-static superhedge.
    pub price: f64,
    /// Martingale form: most expensive consistent valuation.
    pub martingale_price: f64,
    /// Optimal positions of the domination LP on internal nodes.
    pub h: Vec<Vec<f64>>,
    pub ell: Vec<f64>,
    /// Optimal measure of the martingale LP (point-mass θ-kernels).
    pub measure: MartingaleMeasure,
}

/// Superhedging price by two LPs: the domination form over the box corners
/// of `lift` (per-node worst corners, exact for box slices) and the
/// martingale form over consistent price systems. They must agree within
/// `agree_tol`.
pub fn superhedge_price(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    cfg: &SolverConfig,
    agree_tol: f64,
) -> Result<Superhedge> {
    let (price, h, ell) = domination_lp(spec, lift, claim, cfg)?;
    let (martingale_price, measure) = martingale_lp(spec, lift, claim, cfg)?;
    if (price - martingale_price).abs() > agree_tol * price.abs().max(1.0) {
        return Err(Error::SolverTolerance(format!(
            "superhedge LPs disagree: domination {price:.12} vs martingale {martingale_price:.12}"
        )));
    }
    Ok(Superhedge { price, martingale_price, h, ell, measure })
}

fn domination_lp(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    let mut lp = LinearProgram::minimize();
    let y = lp.free();
    lp.set_objective(y, 1.0);
    let ells: Vec<(VarId, VarId)> = spec
        .claims
        .options
        .iter()
        .map(|o| {
            let (p, m) = (lp.nonneg(), lp.nonneg());
            lp.set_objective(p, o.cost);
            lp.set_objective(m, o.cost);
            (p, m)
        })
        .collect();
    let mut hv: Vec<Vec<VarId>> = vec![Vec::new(); nn];
    for k in spec.tree.internal() {
        if spec.charged[k] {
            hv[k] = (0..r).map(|_| lp.free()).collect();
        }
    }
    let mut sv: Vec<Option<VarId>> = vec![None; nn];
    for k in 0..nn {
        if !spec.charged[k] {
            continue;
        }
        let s = lp.free();
        sv[k] = Some(s);
        let parent = spec.tree.nodes[k].parent;
        for &p in &lift.corners {
            let x = &lift.x[k][p];
            // s ≤ (H_parent − H_k)·X  (leaves: (H_parent + Σℓζ − ξ)·X)
            let mut row = vec![(s, 1.0)];
            if let Some(par) = parent {
                for i in 0..r {
                    row.push((hv[par][i], -x[i]));
                }
            }
            let mut rhs = 0.0;
            if spec.tree.is_terminal(k) {
                for (j, o) in spec.claims.options.iter().enumerate() {
                    let v = dot(&o.payoff[k], x);
                    row.push((ells[j].0, -v));
                    row.push((ells[j].1, v));
                }
                rhs = -dot(&claim[k], x);
            } else {
                for i in 0..r {
                    row.push((hv[k][i], x[i]));
                }
            }
            lp.constraint(row, Relation::Le, rhs);
        }
    }
    for leaf in spec.tree.terminals() {
        if !spec.charged[leaf] {
            continue;
        }
        let mut row = vec![(y, 1.0)];
        for n in spec.tree.path(leaf) {
            row.push((sv[n].expect("path of a charged leaf is charged"), 1.0));
        }
        lp.constraint(row, Relation::Ge, 0.0);
    }
    let sol = lp.solve(cfg.lp_pivot_tol)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Unbounded => {
            return Err(Error::OptionArbitrage("superhedging cost is unbounded below".into()));
        }
        LpStatus::Infeasible => {
            return Err(Error::SolverTolerance("domination LP reported infeasible".into()));
        }
    }
    let h = (0..nn)
        .map(|k| {
            if spec.tree.is_terminal(k) {
                return Vec::new();
            }
            let mut v: Vec<f64> = hv[k].iter().map(|&v| sol.value(v)).collect();
            v.resize(r, 0.0);
            v.push(0.0);
            v
        })
        .collect();
    let ell = ells.iter().map(|&(p, m)| sol.value(p) - sol.value(m)).collect();
    Ok((sol.objective, h, ell))
}

fn martingale_lp(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<(f64, MartingaleMeasure)> {
    // Flow form of a consistent price system: node masses Q and M = Q·Z,
    // with martingale and box constraints linear in (Q, M). Lifting with
    // point-mass θ-kernels at Z gives the lifted martingale measure.
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    let mut lp = LinearProgram::maximize();
    let mut q: Vec<Option<VarId>> = vec![None; nn];
    let mut m: Vec<Vec<VarId>> = vec![Vec::new(); nn];
    for k in 0..nn {
        if !spec.charged[k] {
            continue;
        }
        let qk = lp.nonneg();
        q[k] = Some(qk);
        m[k] = (0..r).map(|_| lp.free()).collect();
        for i in 0..r {
            lp.constraint(vec![(m[k][i], 1.0), (qk, -spec.cones.ask[k][i])], Relation::Le, 0.0);
            lp.constraint(vec![(m[k][i], 1.0), (qk, -spec.cones.bid[k][i])], Relation::Ge, 0.0);
        }
        if spec.tree.is_terminal(k) {
            lp.set_objective(qk, claim[k][r]);
            for i in 0..r {
                lp.set_objective(m[k][i], claim[k][i]);
            }
        }
    }
    lp.constraint(vec![(q[0].expect("root is charged"), 1.0)], Relation::Eq, 1.0);
    for k in spec.tree.internal() {
        let Some(qk) = q[k] else { continue };
        let kids: Vec<usize> = spec.tree.children(k).iter().copied().filter(|&c| spec.charged[c]).collect();
        let mut row = vec![(qk, -1.0)];
        row.extend(kids.iter().map(|&c| (q[c].unwrap(), 1.0)));
        lp.constraint(row, Relation::Eq, 0.0);
        for i in 0..r {
            let mut row = vec![(m[k][i], -1.0)];
            row.extend(kids.iter().map(|&c| (m[c][i], 1.0)));
            lp.constraint(row, Relation::Eq, 0.0);
        }
    }
    for o in &spec.claims.options {
        let mut row = Vec::new();
        for leaf in spec.tree.terminals() {
            if let Some(ql) = q[leaf] {
                row.push((ql, o.payoff[leaf][r]));
                row.extend((0..r).map(|i| (m[leaf][i], o.payoff[leaf][i])));
            }
        }
        lp.constraint(row.clone(), Relation::Le, o.cost);
        lp.constraint(row, Relation::Ge, -o.cost);
    }
    let sol = lp.solve(cfg.lp_pivot_tol)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(Error::OptionArbitrage(
                "no consistent price system prices every option within its band".into(),
            ));
        }
        LpStatus::Unbounded => return Err(Error::SolverTolerance("martingale LP reported unbounded".into())),
    }
    let mass: Vec<f64> = q.iter().map(|v| v.map_or(0.0, |v| sol.value(v).max(0.0))).collect();
    let mut cond = vec![Vec::new(); nn];
    let mut z = vec![Vec::new(); nn];
    for k in 0..nn {
        if !spec.tree.is_terminal(k) {
            let kids = spec.tree.children(k);
            cond[k] = if mass[k] > 0.0 {
                let raw: Vec<f64> = kids.iter().map(|&c| mass[c]).collect();
                let tot: f64 = raw.iter().sum();
                raw.iter().map(|v| v / tot).collect()
            } else {
                vec![1.0 / kids.len() as f64; kids.len()]
            };
        }
        if mass[k] > 0.0 {
            let mut zk: Vec<f64> = (0..r)
                .map(|i| (sol.value(m[k][i]) / mass[k]).clamp(spec.cones.bid[k][i], spec.cones.ask[k][i]))
                .collect();
            zk.push(1.0);
            z[k] = zk;
        }
    }
    Ok((sol.objective, lift_cps(spec, lift, &cond, &z, None)))
}

/// Worst-case (over θ and the prior set) expected shortfall of the hedged
/// position `Γ = capital − U/γ`, where `U` is the pathwise log-domain
/// exponent of the optimal semi-static strategy in `fields`.
pub fn measured_shortfall(spec: &MarketSpec, lift: &LiftedTree, fields: &ValueFields, gamma: f64, capital: f64) -> f64 {
    let nn = spec.tree.len();
    let r = spec.cones.risky();
    let claim = fields.claim.as_ref().expect("claim payoff");
    // Largest exponent contribution of each node over its grid.
    let mut worst = vec![0.0; nn];
    for k in 0..nn {
        if !spec.charged[k] {
            continue;
        }
        let hin: Vec<f64> = match spec.tree.nodes[k].parent {
            Some(p) => fields.h[p][..r].to_vec(),
            None => vec![0.0; r],
        };
        worst[k] = lift.x[k]
            .iter()
            .map(|x| {
                if spec.tree.is_terminal(k) {
                    dot(&claim[k], x) + dot(&hin, &x[..r])
                } else {
                    (0..r).map(|i| (hin[i] - fields.h[k][i]) * x[i]).sum::<f64>()
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
    }
    // sup over the rectangular prior set by backward recursion.
    let mut val = vec![0.0; nn];
    for k in (0..nn).rev() {
        if !spec.charged[k] {
            continue;
        }
        if spec.tree.is_terminal(k) {
            let u: f64 = spec.tree.path(k).iter().map(|&n| worst[n]).sum();
            val[k] = (capital - u / gamma).min(0.0).abs();
        } else {
            let kids = spec.tree.children(k);
            val[k] = spec.priors.extremes[k]
                .iter()
                .map(|p| kids.iter().zip(p).filter(|(_, &w)| w > 0.0).map(|(&c, w)| w * val[c]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    val[0]
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub pi_gamma: f64,
    pub superhedge: f64,
    pub gap: f64,
    pub shortfall_bound: f64,
    pub shortfall_measured: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriceReport {
    pub rows: Vec<SweepRow>,
    pub superhedge: f64,
    pub superhedge_martingale: f64,
    /// Smallest increment of π_γ along the sweep.
    pub min_increment: f64,
    /// Terminal gap over the first gap (NaN when the first gap vanishes).
    pub gap_ratio: f64,
    /// Empirical decay exponent of the gap, from a log-log fit.
    pub gap_rate: f64,
    pub violations: Vec<String>,
}

/// γ-sweep of indifference prices against the superhedge price, with the
/// shortfall of the superhedge-funded optimal position at each γ.
pub fn gamma_sweep(
    spec: &MarketSpec,
    lift: &LiftedTree,
    corner_lift: &LiftedTree,
    claim: &[Vec<f64>],
    gammas: &[f64],
    cfg: &SolverConfig,
) -> Result<PriceReport> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0)) || gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("γ-list must be positive and strictly increasing".into()));
    }
    let sh = superhedge_price(spec, corner_lift, claim, cfg, 1e-7)?;
    let zero = log_value(spec, lift, &zero_claim(spec), cfg)?.log_value;
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for &g in gammas {
        let ip = indifference_price_with(spec, lift, claim, g, zero, cfg)?;
        let measured = measured_shortfall(spec, lift, &ip.fields, g, sh.price);
        let bound = std::f64::consts::LN_2 / g;
        if ip.price > sh.price + 1e-7 {
            violations.push(format!("π_γ = {} exceeds π = {} at γ = {g}", ip.price, sh.price));
        }
        if measured > bound + 1e-7 {
            violations.push(format!("shortfall {measured} exceeds log 2/γ at γ = {g}"));
        }
        rows.push(SweepRow {
            gamma: g,
            pi_gamma: ip.price,
            superhedge: sh.price,
            gap: sh.price - ip.price,
            shortfall_bound: bound,
            shortfall_measured: measured,
        });
    }
    let min_increment = rows.windows(2).map(|w| w[1].pi_gamma - w[0].pi_gamma).fold(f64::INFINITY, f64::min);
    if min_increment < -1e-7 {
        violations.push(format!("π_γ decreases along the sweep (increment {min_increment:e})"));
    }
    let first = rows[0].gap;
    let last = rows[rows.len() - 1].gap;
    let gap_ratio = if first > 1e-9 { last / first } else { f64::NAN };
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.gap > 1e-9).map(|r| (r.gamma.ln(), r.gap.ln())).collect();
    let gap_rate = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        -sxy / sxx
    } else {
        f64::NAN
    };
    Ok(PriceReport {
        rows,
        superhedge: sh.price,
        superhedge_martingale: sh.martingale_price,
        min_increment,
        gap_ratio,
        gap_rate,
        violations,
    })
}

pub fn sweep_csv(report: &PriceReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["gamma", "pi_gamma", "superhedge", "gap", "shortfall_bound", "shortfall_measured"])
        .map_err(|e| Error::Io(e.into()))?;
    for r in &report.rows {
        w.write_record(&[
            format!("{}", r.gamma),
            format!("{:.12e}", r.pi_gamma),
            format!("{:.12e}", r.superhedge),
            format!("{:.12e}", r.gap),
            format!("{:.12e}", r.shortfall_bound),
            format!("{:.12e}", r.shortfall_measured),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
}

struct Prices<'a> {
    spec: &'a MarketSpec,
    lift: &'a LiftedTree,
    cfg: &'a SolverConfig,
    zero: f64,
}

impl Prices<'_> {
    fn price(&self, claim: &[Vec<f64>], gamma: f64) -> Result<f64> {
        Ok(indifference_price_with(self.spec, self.lift, claim, gamma, self.zero, self.cfg)?.price)
    }
}

fn check(name: &str, worst: f64, tolerance: f64) -> PropertyCheck {
    PropertyCheck { name: name.into(), passed: worst <= tolerance, worst, tolerance }
}

fn random_claim(spec: &MarketSpec, rng: &mut ChaCha8Rng) -> Claim {
    (0..spec.tree.len())
        .map(|k| {
            if spec.tree.is_terminal(k) {
                (0..spec.d()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            } else {
                Vec::new()
            }
        })
        .collect()
}

/// Numerical check of the basic properties of π_γ: wealth independence,
/// monotonicity in γ, scaling, translation, convexity, monotonicity in the
/// claim, and monotone continuity along an increasing claim sequence.
pub fn property_suite(
    spec: &MarketSpec,
    lift: &LiftedTree,
    claim: &[Vec<f64>],
    gamma: f64,
    seed: u64,
    convexity_draws: usize,
    cfg: &SolverConfig,
) -> Result<Vec<PropertyCheck>> {
    let zero = log_value(spec, lift, &zero_claim(spec), cfg)?.log_value;
    let pr = Prices { spec, lift, cfg, zero };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = pr.price(claim, gamma)?;
    let mut out = Vec::new();

    // (i) extra initial cash w in both runs of the indifference equation.
    let w = 0.7;
    let shifted = log_value(spec, lift, &scaled(&plus_cash(spec, &zero_claim(spec), -w), gamma), cfg)?.log_value;
    let with = log_value(spec, lift, &scaled(&plus_cash(spec, claim, -w), gamma), cfg)?.log_value;
    out.push(check("wealth_independence", ((with - shifted) / gamma - base).abs(), 1e-8));

    // (ii) nondecreasing in γ.
    let mut prev = pr.price(claim, gamma / 2.0)?;
    let mut worst = 0.0f64;
    for g in [gamma, 2.0 * gamma, 4.0 * gamma] {
        let p = if g == gamma { base } else { pr.price(claim, g)? };
        worst = worst.max(prev - p);
        prev = p;
    }
    out.push(check("monotone_in_gamma", worst, 1e-7));

    // (iii) π_γ(βξ) = β·π_{βγ}(ξ).
    let mut worst = 0.0f64;
    for beta in [0.25, 0.5, 1.0] {
        let lhs = pr.price(&scaled(claim, beta), gamma)?;
        let rhs = beta * pr.price(claim, beta * gamma)?;
        worst = worst.max((lhs - rhs).abs());
    }
    out.push(check("scaling", worst, 1e-7));

    // (iv) translation by cash.
    let k = 0.37;
    let t = pr.price(&plus_cash(spec, claim, k), gamma)?;
    out.push(check("translation", (t - base - k).abs(), 1e-8));

    // (v) convexity on random triples.
    let mut worst = 0.0f64;
    for _ in 0..convexity_draws {
        let (x1, x2) = (random_claim(spec, &mut rng), random_claim(spec, &mut rng));
        let a: f64 = rng.gen_range(0.05..0.95);
        let mix = pr.price(&combine(&x1, &x2, a, 1.0 - a), gamma)?;
        let chord = a * pr.price(&x1, gamma)? + (1.0 - a) * pr.price(&x2, gamma)?;
        worst = worst.max(mix - chord);
    }
    out.push(check("convexity", worst, 1e-8));

    // (vi) monotone in the claim.
    let bump: Claim = (0..spec.tree.len())
        .map(|k| {
            if spec.tree.is_terminal(k) {
                (0..spec.d()).map(|_| rng.gen_range(0.0..0.5)).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let bigger = pr.price(&combine(claim, &bump, 1.0, 1.0), gamma)?;
    out.push(check("monotone_in_claim", base - bigger, 1e-8));

    // Continuity from below: ξ_n = ξ − 2^{-n}·bump ↗ ξ.
    let mut worst = 0.0f64;
    let mut prev = f64::NEG_INFINITY;
    let mut last = f64::NAN;
    for n in 1..=6 {
        let p = pr.price(&combine(claim, &bump, 1.0, -(0.5f64).powi(n)), gamma)?;
        worst = worst.max(prev - p).max(p - base);
        prev = p;
        last = p;
    }
    // The last step is within 2^{-6}·(worst bump value) of the limit.
    let reach = base - last;
    let scale: f64 = spec
        .tree
        .terminals()
        .map(|k| lift.x[k].iter().map(|x| dot(&bump[k], x)).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    worst = worst.max(reach - scale * (0.5f64).powi(6));
    out.push(check("monotone_continuity", worst, 1e-7));
    Ok(out)
}
