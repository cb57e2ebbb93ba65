use entropic_hedge::fixtures::{additive_binomial, one_period, random_market, RandomMarketConfig};
use entropic_hedge::market::{check_na2, parse_market, MarketSpec};
use entropic_hedge::solvers::{LinearProgram, LpStatus, Relation};
use entropic_hedge::{tol, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BINOMIAL: &str = r#"{
  "horizon": 1, "assets": 2, "spread_bound": 1.3,
  "nodes": [
    {"id": "r", "t": 0, "children": ["u", "d"], "mid": [1.0], "bid": [1.0], "ask": [1.0], "priors": [[0.5, 0.5]]},
    {"id": "u", "t": 1, "mid": [1.2], "bid": [1.2], "ask": [1.2]},
    {"id": "d", "t": 1, "mid": [0.8], "bid": [0.8], "ask": [0.8]}
  ],
  "endowment": {"u": [1.0, 0.0]},
  "gamma": 1.0
}"#;

#[test]
fn frictionless_binomial_loads() {
    let spec = parse_market(BINOMIAL).unwrap();
    assert_eq!(spec.tree.len(), 3);
    assert_eq!(spec.claims.endowment[2], vec![0.0, 0.0]);
    assert!(spec.cones.frictionless(0));
}

#[test]
fn inverted_spread_names_node() {
    let text =
        BINOMIAL.replace(r#""mid": [1.2], "bid": [1.2], "ask": [1.2]"#, r#""mid": [1.2], "bid": [1.25], "ask": [1.2]"#);
    let err = parse_market(&text).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("id=u") && msg.contains("exceeds ask"), "{msg}");
}

#[test]
fn prior_mass_violation() {
    let text = BINOMIAL.replace("[[0.5, 0.5]]", "[[0.6, 0.5]]");
    let msg = parse_market(&text).unwrap_err().to_string();
    assert!(msg.contains("sums to 1.1"), "{msg}");
}

#[test]
fn unknown_keys_and_bad_topology() {
    let text = BINOMIAL.replace(r#""gamma": 1.0"#, r#""gamma": 1.0, "extra": 3"#);
    assert!(matches!(parse_market(&text), Err(Error::Schema(_))));
    let text = BINOMIAL.replace(r#"["u", "d"]"#, r#"["u", "x"]"#);
    assert!(matches!(parse_market(&text), Err(Error::Topology(_))));
}

#[test]
fn every_failing_node_is_listed() {
    let text = BINOMIAL
        .replace("[[0.5, 0.5]]", "[[0.6, 0.5]]")
        .replace(r#""mid": [0.8], "bid": [0.8], "ask": [0.8]"#, r#""mid": [0.8], "bid": [0.9], "ask": [0.8]"#);
    match parse_market(&text) {
        Err(Error::Validation(list)) => assert_eq!(list.len(), 2, "{list:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn spread_binomial_has_strict_cps() {
    let q = |s: f64| (s, s * 0.98, s * 1.02);
    let spec = MarketSpec::from_document(one_period(q(1.0), q(1.2), q(0.8), &[vec![0.5, 0.5]], 1.1)).unwrap();
    let rep = check_na2(&spec, 1e-10).unwrap();
    assert!(rep.holds && rep.epsilon > 0.0);
    let cps = rep.certificate.unwrap();
    assert!(cps.martingale_residual(&spec) < tol::MARTINGALE);
    assert!(cps.box_slack > 0.0);
    for k in 0..3 {
        assert_eq!(cps.z[k][1], 1.0);
    }
}

#[test]
fn monotone_arbitrage_is_detected() {
    let spec = MarketSpec::from_document(one_period(
        (1.0, 0.98, 1.02),
        (1.2, 1.1, 1.3),
        (1.1, 1.05, 1.15),
        &[vec![0.5, 0.5]],
        1.2,
    ))
    .unwrap();
    let rep = check_na2(&spec, 1e-10).unwrap();
    assert!(!rep.holds);
    assert_eq!(rep.witness.as_ref().unwrap().node, "root");
    assert_eq!(rep.into_result().unwrap_err().exit_code(), 4);
}

#[test]
fn constant_price_certificate_is_the_price() {
    let spec = MarketSpec::from_document(additive_binomial(2, 1.0, 0.0, &[vec![0.5, 0.5]], 0.0)).unwrap();
    let cps = check_na2(&spec, 1e-10).unwrap().certificate.unwrap();
    for k in 0..spec.tree.len() {
        assert_eq!(cps.z[k][0], 1.0);
    }
}

#[test]
fn witness_is_the_failing_later_node() {
    // root is fine but the up node at t = 1 has a dominated move
    let mut doc = additive_binomial(2, 3.0, 1.0, &[vec![0.5, 0.5]], 0.0);
    for n in doc.nodes.iter_mut() {
        if n.id.to_string() == "nuu" {
            n.mid = vec![4.5];
            n.bid = vec![4.5];
            n.ask = vec![4.5];
        }
        if n.id.to_string() == "nud" {
            n.mid = vec![4.2];
            n.bid = vec![4.2];
            n.ask = vec![4.2];
        }
    }
    let spec = MarketSpec::from_document(doc).unwrap();
    let rep = check_na2(&spec, 1e-10).unwrap();
    assert!(!rep.holds);
    let w = rep.witness.unwrap();
    assert_eq!((w.node.as_str(), w.t), ("nu", 1));
}

/// Per-node oracle: a strictly positive one-step martingale measure exists
/// everywhere.
fn frictionless_oracle(spec: &MarketSpec) -> bool {
    for n in spec.tree.internal() {
        if !spec.charged[n] {
            continue;
        }
        let kids: Vec<usize> = spec.tree.children(n).iter().copied().filter(|&c| spec.charged[c]).collect();
        let mut lp = LinearProgram::maximize();
        let eps = lp.var(None, Some(1.0));
        lp.set_objective(eps, 1.0);
        let q: Vec<_> = kids.iter().map(|_| lp.nonneg()).collect();
        lp.constraint(q.iter().map(|&v| (v, 1.0)).collect(), Relation::Eq, 1.0);
        for &v in &q {
            lp.constraint(vec![(v, 1.0), (eps, -1.0)], Relation::Ge, 0.0);
        }
        for i in 0..spec.cones.risky() {
            let row = q.iter().zip(&kids).map(|(&v, &c)| (v, spec.cones.mid[c][i])).collect();
            lp.constraint(row, Relation::Eq, spec.cones.mid[n][i]);
        }
        let r = lp.solve(1e-10).unwrap();
        if r.status != LpStatus::Optimal || r.value(eps) <= tol::LP_SLACK {
            return false;
        }
    }
    true
}

#[test]
fn frictionless_check_matches_nodewise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = RandomMarketConfig { max_spread: 0.0, ..Default::default() };
    for trial in 0..30 {
        let spec = random_market(&mut rng, &cfg);
        // perturb one terminal price to create arbitrage in some trials
        let mut doc = spec.document().clone();
        if trial % 3 == 0 {
            let last = doc.nodes.len() - 1;
            let bump = doc.nodes[last].mid.iter().map(|v| v * 1.6).collect::<Vec<_>>();
            for sib in doc.nodes.iter_mut().rev().take(3) {
                if sib.t == doc.horizon {
                    sib.mid = bump.clone();
                    sib.bid = bump.clone();
                    sib.ask = bump.clone();
                }
            }
        }
        let spec = MarketSpec::from_document(doc).unwrap();
        let frictionless = (0..spec.tree.len()).all(|k| spec.cones.frictionless(k));
        assert!(frictionless);
        assert_eq!(check_na2(&spec, 1e-10).unwrap().holds, frictionless_oracle(&spec), "trial {trial}");
    }
}

#[test]
fn random_fixtures_are_arbitrage_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let spec = random_market(&mut rng, &RandomMarketConfig::default());
        let rep = check_na2(&spec, 1e-10).unwrap();
        assert!(rep.holds);
        assert!(rep.certificate.unwrap().martingale_residual(&spec) < tol::MARTINGALE);
    }
}
