//! Acceptance criteria, one PASS/FAIL line each. Run with `--nocapture` to
//! see the table; `ACCEPTANCE_STRICT=1` makes any failed criterion fail the test.

use std::time::Instant;

use entropic_hedge::dual::{best_candidate, dual_ascent, dual_objective, extract_cps, MeasureSampler};
use entropic_hedge::fixtures::{
    additive_binomial, incomplete_trinomial, random_market, skewed_binomial, spread_binomial, with_terminal_claim,
    RandomMarketConfig,
};
use entropic_hedge::lift::{build_lift, effective_endowment, transfers_for_claim, Strategy};
use entropic_hedge::market::{node_doc, MarketDocument, MarketSpec};
use entropic_hedge::pricing::{gamma_sweep, property_suite, superhedge_price};
use entropic_hedge::primal::{backward_induction, extract_strategy, log_claim, Payoff, Statics};
use entropic_hedge::solvers::SolverConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SWEEP: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

struct Table {
    rows: Vec<(usize, bool, String)>,
    clock: Instant,
}

impl Table {
    fn record(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        let secs = self.clock.elapsed().as_secs_f64();
        self.clock = Instant::now();
        println!("[{}] {id:>2} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
        self.rows.push((id, ok, detail));
    }
}

fn random_fixtures(n: usize, seed: u64) -> Vec<MarketSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_market(&mut rng, &RandomMarketConfig::default())).collect()
}

fn call(strike: f64) -> impl Fn(f64) -> Vec<f64> {
    move |s| vec![0.0, (s - strike).max(0.0)]
}

/// Frictionless single-prior trinomial: incomplete without spreads.
fn skewed_trinomial() -> MarketSpec {
    let f = |v: f64| (vec![v], vec![v], vec![v]);
    let (m, b, a) = f(1.0);
    let mut nodes = vec![node_doc("root", 0, &["u", "m", "d"], m, b, a, vec![vec![0.5, 0.3, 0.2]])];
    for (id, v) in [("u", 1.2), ("m", 1.0), ("d", 0.8)] {
        let (m, b, a) = f(v);
        nodes.push(node_doc(id, 1, &[], m, b, a, vec![]));
    }
    let doc = MarketDocument {
        horizon: 1,
        assets: 2,
        spread_bound: 1.1,
        nodes,
        endowment: Default::default(),
        options: vec![],
        gamma: 1.0,
    };
    with_terminal_claim(&MarketSpec::from_document(doc).unwrap(), call(1.0))
}

/// Named fixtures with their claims; the flag marks incomplete ones.
fn named_fixtures() -> Vec<(&'static str, MarketSpec, bool)> {
    let sym = MarketSpec::from_document(additive_binomial(2, 3.0, 1.0, &[vec![0.6, 0.4]], 0.0)).unwrap();
    vec![
        ("skewed-binomial", with_terminal_claim(&skewed_binomial(2), |_| vec![0.0, 0.0]), false),
        ("replicable-stock", with_terminal_claim(&sym, |_| vec![1.0, 0.0]), false),
        ("replicable-call", with_terminal_claim(&sym, |s| vec![0.0, (s - 3.0).max(0.0)]), false),
        ("spread-binomial-call", with_terminal_claim(&spread_binomial(), call(1.0)), true),
        ("incomplete-trinomial", incomplete_trinomial(), true),
        ("skewed-trinomial-call", skewed_trinomial(), true),
    ]
}

/// Random frictionless one-period market with d = 2, several priors and a
/// random linear claim.
fn frictionless_one_period(rng: &mut ChaCha8Rng) -> MarketSpec {
    let k = rng.gen_range(2..=3);
    let s0: f64 = rng.gen_range(0.8..1.2);
    let mut moves: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let qbar: Vec<f64> = {
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let t: f64 = v.iter().sum();
        v.iter().map(|x| x / t).collect()
    };
    let mean: f64 = moves.iter().zip(&qbar).map(|(m, q)| m * q).sum();
    for m in moves.iter_mut() {
        *m -= mean;
    }
    let ids: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
    let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let priors: Vec<Vec<f64>> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let t: f64 = v.iter().sum();
            let mut p: Vec<f64> = v.iter().map(|x| x / t).collect();
            let head: f64 = p[..k - 1].iter().sum();
            p[k - 1] = 1.0 - head;
            p
        })
        .collect();
    let mut nodes = vec![node_doc("root", 0, &refs, vec![s0], vec![s0], vec![s0], priors)];
    let mut doc = MarketDocument {
        horizon: 1,
        assets: 2,
        spread_bound: 1.1,
        nodes: Vec::new(),
        endowment: Default::default(),
        options: vec![],
        gamma: 1.0,
    };
    for (c, id) in ids.iter().enumerate() {
        let s = s0 * (1.0 + moves[c]);
        nodes.push(node_doc(id, 1, &[], vec![s], vec![s], vec![s], vec![]));
        doc.endowment.insert(id.clone(), vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
    }
    doc.nodes = nodes;
    MarketSpec::from_document(doc).unwrap()
}

/// Brute-force `min_h max_k log Σ_c p_k(c) exp(φ_c·S_c + h (S_c − S_0))` on a
/// 1e-3 grid over a bracket found by doubling.
fn grid_minimax(spec: &MarketSpec, phi: &[Vec<f64>]) -> f64 {
    let kids = spec.tree.children(0).to_vec();
    let s0 = spec.cones.mid[0][0];
    let f = |h: f64| -> f64 {
        spec.priors.extremes[0]
            .iter()
            .map(|p| {
                let terms: Vec<f64> = kids
                    .iter()
                    .map(|&c| phi[c][0] * spec.cones.mid[c][0] + phi[c][1] + h * (spec.cones.mid[c][0] - s0))
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + p.iter().zip(&terms).map(|(w, t)| w * (t - m).exp()).sum::<f64>().ln()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut b = 1.0;
    while f(b) < f(0.0) + 1.0 || f(-b) < f(0.0) + 1.0 {
        b *= 2.0;
    }
    let n = (2.0 * b / 1e-3).ceil() as i64;
    (0..=n).map(|i| f(-b + i as f64 * 1e-3)).fold(f64::INFINITY, f64::min)
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let cfg = SolverConfig::default();
    let mut table = Table { rows: Vec::new(), clock: Instant::now() };
    let randoms = random_fixtures(50, 2024);
    let named = named_fixtures();

    // 1 & 2: strong and weak duality on random fixtures.
    let mut worst_gap = 0.0f64;
    let mut worst_weak = f64::NEG_INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for spec in &randoms {
        let lift = build_lift(spec, 3).unwrap();
        let phi = log_claim(&spec.claims.endowment, spec.claims.gamma);
        let f = backward_induction(spec, &lift, &Payoff::Claim(phi.clone()), &Statics::Optimize, &cfg).unwrap();
        let (mut best, m) = best_candidate(spec, &lift, &f, &phi, &cfg);
        if spec.num_options() == 0 {
            let cps = extract_cps(spec, &m, &cfg);
            best = best.max(dual_ascent(spec, &lift, &phi, (&cps.cond, &cps.z), &cfg, 200).objective);
        }
        worst_gap = worst_gap.max((f.log_value - best).abs() / f.log_value.abs().max(1.0));
        let sampler = MeasureSampler::new(spec, &lift, &mut rng, 4);
        let payoff = Payoff::Claim(phi);
        for _ in 0..100 {
            let q = sampler.sample(spec, &lift, &mut rng);
            worst_weak = worst_weak.max(dual_objective(spec, &q, &payoff, &cfg, None) - f.log_value);
        }
    }
    table.record(
        1,
        "duality gap",
        worst_gap <= 1e-4,
        format!("worst |L − D|/max(1,|L|) = {worst_gap:.2e} on 50 fixtures (tol 1e-4)"),
    );
    table.record(
        2,
        "weak duality",
        worst_weak <= 1e-9,
        format!("max D(Q) − L = {worst_weak:.2e} over 5000 measures (tol 1e-9)"),
    );

    // 3: closed forms.
    let kl = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    let mut errs = Vec::new();
    for (t, tol) in [(1usize, 1e-8), (2, 1e-7)] {
        let spec = skewed_binomial(t);
        let lift = build_lift(&spec, 2).unwrap();
        let zero = Payoff::Claim(log_claim(&spec.claims.endowment, 1.0));
        let l = backward_induction(&spec, &lift, &zero, &Statics::Fixed(vec![]), &cfg).unwrap().log_value;
        errs.push(((l + t as f64 * kl).abs(), tol, l));
    }
    table.record(
        3,
        "closed-form oracle",
        errs.iter().all(|(e, tol, _)| e <= tol),
        format!("L(T=1) = {:.9}, L(T=2) = {:.9}; errors {:.1e}, {:.1e}", errs[0].2, errs[1].2, errs[0].0, errs[1].0),
    );

    // 4: reformulation identity for random strategies.
    let mut worst = 0.0f64;
    let mut srng = ChaCha8Rng::seed_from_u64(4);
    let mut all: Vec<&MarketSpec> = randoms.iter().take(20).collect();
    all.extend(named.iter().map(|n| &n.1));
    for spec in &all {
        let lift = build_lift(spec, 2).unwrap();
        for _ in 0..20 {
            let mut s = Strategy::zero(spec);
            for k in spec.tree.internal() {
                for i in 0..spec.d() - 1 {
                    s.h[k][i] = srng.gen_range(-3.0..3.0);
                }
            }
            for l in s.ell.iter_mut() {
                *l = srng.gen_range(-1.0..1.0);
            }
            let claim = effective_endowment(spec, &s.ell);
            let tr = transfers_for_claim(spec, &s.h, &claim);
            for leaf in spec.tree.terminals() {
                let wealth = tr.liquidated_wealth(spec, &claim, leaf);
                let min = lift
                    .theta_paths(spec, leaf)
                    .iter()
                    .map(|p| lift.hedged_value(spec, &s.h, &claim, leaf, p))
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max((min - wealth).abs() / wealth.abs().max(1.0));
            }
        }
    }
    table.record(
        4,
        "reformulation identity",
        worst <= 1e-12,
        format!("worst relative mismatch {worst:.2e} (tol 1e-12)"),
    );

    // 5: strategy replay.
    let mut worst = 0.0f64;
    for spec in randoms.iter().take(20).chain(named.iter().map(|n| &n.1)) {
        let lift = build_lift(spec, 3).unwrap();
        let phi = Payoff::Claim(log_claim(&spec.claims.endowment, spec.claims.gamma));
        let f = backward_induction(spec, &lift, &phi, &Statics::Optimize, &cfg).unwrap();
        match extract_strategy(spec, &lift, &f, &cfg, 1e-6) {
            Ok(ex) => worst = worst.max((ex.replay_value - f.root_value).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    table.record(5, "strategy replay", worst <= 1e-6, format!("worst |replay − V̄| = {worst:.2e} (tol 1e-6)"));

    // 6: superhedge LP self-duality and the hand value.
    let mut worst = 0.0f64;
    for spec in randoms.iter().chain(named.iter().map(|n| &n.1)) {
        let corners = build_lift(spec, 2).unwrap();
        match superhedge_price(spec, &corners, &spec.claims.endowment, &cfg, 1.0) {
            Ok(sh) => worst = worst.max((sh.price - sh.martingale_price).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    let unit = with_terminal_claim(&spread_binomial(), |_| vec![1.0, 0.0]);
    let hand =
        superhedge_price(&unit, &build_lift(&unit, 2).unwrap(), &unit.claims.endowment, &cfg, 1e-7).unwrap().price;
    table.record(
        6,
        "superhedge LP duality",
        worst <= 1e-7 && (hand - 1.02).abs() <= 1e-12,
        format!("worst form mismatch {worst:.2e} (tol 1e-7); spread-binomial π = {hand} (a₀ = 1.02)"),
    );

    // 7 & 8: γ-sweeps and shortfall.
    let mut ok7 = true;
    let mut ok8 = true;
    let mut notes = Vec::new();
    let mut worst_short = f64::NEG_INFINITY;
    for (name, spec, incomplete) in &named {
        if *name == "skewed-binomial" {
            continue;
        }
        let lift = build_lift(spec, 3).unwrap();
        let corners = build_lift(spec, 2).unwrap();
        let rep = gamma_sweep(spec, &lift, &corners, &spec.claims.endowment, &SWEEP, &cfg).unwrap();
        let bounded = rep.rows.iter().all(|r| r.pi_gamma <= r.superhedge + 1e-7);
        let monotone = rep.min_increment >= -1e-7;
        if *incomplete {
            let shrink = rep.gap_ratio < 0.25;
            ok7 &= bounded && monotone && shrink;
            notes.push(format!("{name}: ratio {:.3}, rate {:.2}", rep.gap_ratio, rep.gap_rate));
        } else {
            let spread = rep.rows.iter().map(|r| r.pi_gamma).fold(f64::NEG_INFINITY, f64::max)
                - rep.rows.iter().map(|r| r.pi_gamma).fold(f64::INFINITY, f64::min);
            ok7 &= bounded && monotone && spread <= 1e-7 && rep.rows.iter().all(|r| r.gap.abs() <= 1e-7);
            notes.push(format!("{name}: constant within {spread:.1e}"));
        }
        for r in &rep.rows {
            worst_short = worst_short.max(r.shortfall_measured - r.shortfall_bound);
            ok8 &= r.shortfall_measured <= r.shortfall_bound + 1e-7;
        }
    }
    table.record(7, "indifference asymptotics", ok7, notes.join("; "));
    table.record(8, "shortfall bound", ok8, format!("max measured − log2/γ = {worst_short:.3e} (tol 1e-7)"));

    // 9: property suite.
    let mut failed = Vec::new();
    let mut count = 0;
    for (name, spec) in named
        .iter()
        .map(|n| (n.0.to_string(), &n.1))
        .chain(randoms.iter().take(3).enumerate().map(|(i, s)| (format!("random-{i}"), s)))
    {
        let lift = build_lift(spec, 3).unwrap();
        let checks = property_suite(spec, &lift, &spec.claims.endowment, 1.0, 0, 20, &cfg).unwrap();
        count += checks.len();
        failed.extend(checks.iter().filter(|c| !c.passed).map(|c| format!("{name}/{} ({:.1e})", c.name, c.worst)));
    }
    table.record(
        9,
        "property suite",
        failed.is_empty(),
        if failed.is_empty() { format!("{count} checks passed") } else { failed.join(", ") },
    );

    // 10: zero-spread reduction against a brute-force minimax.
    let mut frng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_oracle = 0.0f64;
    let mut worst_gap = 0.0f64;
    for _ in 0..10 {
        let spec = frictionless_one_period(&mut frng);
        let lift = build_lift(&spec, 2).unwrap();
        let phi = spec.claims.endowment.clone();
        let f = backward_induction(&spec, &lift, &Payoff::Claim(phi.clone()), &Statics::Fixed(vec![]), &cfg).unwrap();
        worst_oracle = worst_oracle.max((f.log_value - grid_minimax(&spec, &phi)).abs());
        let (d, _) = best_candidate(&spec, &lift, &f, &phi, &cfg);
        worst_gap = worst_gap.max((f.log_value - d).abs());
    }
    table.record(
        10,
        "zero-spread reduction",
        worst_oracle <= 1e-5 && worst_gap <= 1e-4,
        format!("worst |L − grid oracle| = {worst_oracle:.2e} (tol 1e-5); duality gap {worst_gap:.1e}"),
    );

    // 11: grid refinement.
    let mut worst = 0.0f64;
    for spec in randoms.iter().chain(named.iter().map(|n| &n.1)) {
        let phi = Payoff::Claim(log_claim(&spec.claims.endowment, spec.claims.gamma));
        let v: Vec<f64> = [2, 5]
            .iter()
            .map(|&m| {
                let lift = build_lift(spec, m).unwrap();
                backward_induction(spec, &lift, &phi, &Statics::Optimize, &cfg).unwrap().root_value
            })
            .collect();
        worst = worst.max((v[0] - v[1]).abs());
    }
    table.record(
        11,
        "grid-refinement invariance",
        worst <= 1e-9,
        format!("worst |V̄(m=2) − V̄(m=5)| = {worst:.2e} (tol 1e-9)"),
    );

    println!("acceptance suite finished in {:.1}s", start.elapsed().as_secs_f64());
    let failed: Vec<usize> = table.rows.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("{} of {} criteria passed; failed: {failed:?}", table.rows.len() - failed.len(), table.rows.len());
    // The table is the report; set ACCEPTANCE_STRICT=1 to turn failures into a test failure.
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
