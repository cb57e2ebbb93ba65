//! Small reference markets and a seeded random market generator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::market::{node_doc, MarketDocument, MarketSpec, NodeDoc, OptionDoc};

fn doc(horizon: usize, assets: usize, c: f64, nodes: Vec<NodeDoc>) -> MarketDocument {
    MarketDocument {
        horizon,
        assets,
        spread_bound: c,
        nodes,
        endowment: BTreeMap::new(),
        options: Vec::new(),
        gamma: 1.0,
    }
}

/// d = 2 recombination-free binomial tree with additive moves `±step`,
/// relative half-spread `spread` at every node and the same prior extremes
/// at every internal node.
pub fn additive_binomial(horizon: usize, s0: f64, step: f64, extremes: &[Vec<f64>], spread: f64) -> MarketDocument {
    let mut nodes = Vec::new();
    let mut layer = vec![("n".to_string(), s0)];
    for t in 0..=horizon {
        let mut next = Vec::new();
        for (id, s) in &layer {
            let (up, down) = (format!("{id}u"), format!("{id}d"));
            let (kids, priors) = if t < horizon {
                next.push((up.clone(), s + step));
                next.push((down.clone(), s - step));
                (vec![up.as_str(), down.as_str()], extremes.to_vec())
            } else {
                (vec![], vec![])
            };
            nodes.push(node_doc(id, t, &kids, vec![*s], vec![s * (1.0 - spread)], vec![s * (1.0 + spread)], priors));
        }
        layer = next;
    }
    doc(horizon, 2, 1.3, nodes)
}

/// One-period binomial with arbitrary terminal prices and quotes.
pub fn one_period(
    s0: (f64, f64, f64),
    up: (f64, f64, f64),
    down: (f64, f64, f64),
    extremes: &[Vec<f64>],
    c: f64,
) -> MarketDocument {
    let nodes = vec![
        node_doc("root", 0, &["up", "down"], vec![s0.0], vec![s0.1], vec![s0.2], extremes.to_vec()),
        node_doc("up", 1, &[], vec![up.0], vec![up.1], vec![up.2], vec![]),
        node_doc("down", 1, &[], vec![down.0], vec![down.1], vec![down.2], vec![]),
    ];
    doc(1, 2, c, nodes)
}

/// Single-prior frictionless binomial, moves ±1 from 3.
pub fn skewed_binomial(horizon: usize) -> MarketSpec {
    MarketSpec::from_document(additive_binomial(horizon, 3.0, 1.0, &[vec![0.75, 0.25]], 0.0)).expect("valid fixture")
}

/// Frictionless tree whose price never moves.
pub fn constant_price(horizon: usize) -> MarketSpec {
    MarketSpec::from_document(additive_binomial(horizon, 1.0, 0.0, &[vec![0.5, 0.5]], 0.0)).expect("valid fixture")
}

/// One-period binomial S₀ = 1 → {1.2, 0.8} with 2% relative spread.
pub fn spread_binomial() -> MarketSpec {
    let q = |s: f64| (s, s * 0.98, s * 1.02);
    MarketSpec::from_document(one_period(q(1.0), q(1.2), q(0.8), &[vec![0.6, 0.4]], 1.1)).expect("valid fixture")
}

/// Endowment equal to `f(node mid price)` at every terminal node (d = 2).
pub fn with_terminal_claim(spec: &MarketSpec, f: impl Fn(f64) -> Vec<f64>) -> MarketSpec {
    let mut endow = spec.claims.endowment.clone();
    for k in spec.tree.terminals() {
        endow[k] = f(spec.cones.mid[k][0]);
    }
    spec.with_endowment(endow)
}

/// Two-prior trinomial with spreads and a call-style claim: an incomplete
/// market in which indifference prices stay strictly below the superhedge.
pub fn incomplete_trinomial() -> MarketSpec {
    let s = |v: f64, sp: f64| (vec![v], vec![v * (1.0 - sp)], vec![v * (1.0 + sp)]);
    let mut nodes = Vec::new();
    let (m, b, a) = s(1.0, 0.01);
    nodes.push(node_doc("root", 0, &["u", "m", "d"], m, b, a, vec![vec![0.3, 0.4, 0.3], vec![0.2, 0.5, 0.3]]));
    for (id, v) in [("u", 1.15), ("m", 1.0), ("d", 0.85)] {
        let (m, b, a) = s(v, 0.01);
        nodes.push(node_doc(id, 1, &[], m, b, a, vec![]));
    }
    let mut d = doc(1, 2, 1.1, nodes);
    for (id, v) in [("u", 1.15f64), ("m", 1.0), ("d", 0.85)] {
        d.endowment.insert(id.to_string(), vec![0.0, (v - 0.95).max(0.0)]);
    }
    MarketSpec::from_document(d).expect("valid fixture")
}

#[derive(Debug, Clone)]
pub struct RandomMarketConfig {
    pub max_horizon: usize,
    pub max_assets: usize,
    pub max_children: usize,
    pub max_extremes: usize,
    pub max_spread: f64,
    pub max_options: usize,
    pub spread_bound: f64,
}

impl Default for RandomMarketConfig {
    fn default() -> Self {
        Self {
            max_horizon: 3,
            max_assets: 3,
            max_children: 3,
            max_extremes: 3,
            max_spread: 0.05,
            max_options: 2,
            spread_bound: 1.1,
        }
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| -(rng.gen::<f64>().max(1e-12)).ln() + 0.05).collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    // exact unit mass after rounding
    let tail: f64 = v[..k - 1].iter().sum();
    v[k - 1] = 1.0 - tail;
    v
}

/// Random arbitrage-free market. The mid price is a full-support martingale
/// under a reference measure `q̄`, which also fixes the option costs so that
/// `|E_q̄[ζ·S_T]| < cost` for every option.
pub fn random_market(rng: &mut ChaCha8Rng, cfg: &RandomMarketConfig) -> MarketSpec {
    let horizon = rng.gen_range(1..=cfg.max_horizon);
    let d = rng.gen_range(2..=cfg.max_assets);
    let r = d - 1;
    // Keep trees small enough for the dense solvers.
    let max_children = if horizon == 3 && d == 3 { cfg.max_children.min(2) } else { cfg.max_children };
    struct Pending {
        id: String,
        t: usize,
        s: Vec<f64>,
        weight: f64,
    }
    let mut nodes = Vec::new();
    let mut terminals: Vec<(String, Vec<f64>, f64)> = Vec::new();
    let mut queue =
        vec![Pending { id: "r".into(), t: 0, s: (0..r).map(|_| rng.gen_range(0.8..1.5)).collect(), weight: 1.0 }];
    let mut qi = 0;
    while qi < queue.len() {
        let (id, t, s, w) = (queue[qi].id.clone(), queue[qi].t, queue[qi].s.clone(), queue[qi].weight);
        qi += 1;
        let quotes = |rng: &mut ChaCha8Rng, s: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let frictionless = rng.gen_bool(0.15);
            s.iter()
                .map(|&v| {
                    if frictionless {
                        (v, v)
                    } else {
                        let lo = rng.gen_range(0.0..=cfg.max_spread);
                        let hi = rng.gen_range(0.0..=cfg.max_spread);
                        (v * (1.0 - lo), v * (1.0 + hi))
                    }
                })
                .unzip()
        };
        let (bid, ask) = quotes(rng, &s);
        if t == horizon {
            nodes.push(node_doc(&id, t, &[], s.clone(), bid, ask, vec![]));
            terminals.push((id, s, w));
            continue;
        }
        let k = rng.gen_range(2..=max_children);
        let qbar = dirichlet(rng, k);
        let mut moves: Vec<Vec<f64>> = (0..k).map(|_| (0..r).map(|_| rng.gen_range(-0.2..0.2)).collect()).collect();
        for i in 0..r {
            let mean: f64 = (0..k).map(|c| qbar[c] * moves[c][i]).sum();
            for m in moves.iter_mut() {
                m[i] -= mean;
            }
        }
        let ne = rng.gen_range(1..=cfg.max_extremes);
        let priors: Vec<Vec<f64>> = (0..ne).map(|_| dirichlet(rng, k)).collect();
        let kids: Vec<String> = (0..k).map(|c| format!("{id}{c}")).collect();
        let kid_refs: Vec<&str> = kids.iter().map(|s| s.as_str()).collect();
        nodes.push(node_doc(&id, t, &kid_refs, s.clone(), bid, ask, priors));
        for c in 0..k {
            let sc: Vec<f64> = (0..r).map(|i| s[i] * (1.0 + moves[c][i])).collect();
            queue.push(Pending { id: kids[c].clone(), t: t + 1, s: sc, weight: w * qbar[c] });
        }
    }
    let mut document = doc(horizon, d, cfg.spread_bound, nodes);
    for (id, _, _) in &terminals {
        document.endowment.insert(id.clone(), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let ne = rng.gen_range(0..=cfg.max_options);
    for _ in 0..ne {
        let mut payoff = BTreeMap::new();
        let mut mean = 0.0;
        for (id, s, w) in &terminals {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            mean += w * (z[..r].iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + z[r]);
            payoff.insert(id.clone(), z);
        }
        let cost = mean.abs() + 0.05 + rng.gen_range(0.0..0.1);
        document.options.push(OptionDoc { payoff, cost });
    }
    document.gamma = rng.gen_range(0.5..2.0);
    MarketSpec::from_document(document).expect("random fixture is valid")
}
