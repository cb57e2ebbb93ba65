use entropic_hedge::fixtures::{additive_binomial, constant_price, one_period, skewed_binomial, with_terminal_claim};
use entropic_hedge::lift::build_lift;
use entropic_hedge::market::MarketSpec;
use entropic_hedge::primal::{backward_induction, extract_strategy, replay, robust_value, Payoff, Statics};
use entropic_hedge::solvers::SolverConfig;

fn zero_claim(spec: &entropic_hedge::market::MarketSpec) -> Payoff {
    Payoff::Claim(
        (0..spec.tree.len()).map(|k| if spec.tree.is_terminal(k) { vec![0.0; spec.d()] } else { vec![] }).collect(),
    )
}

#[test]
fn skewed_binomial_closed_form() {
    let cfg = SolverConfig::default();
    let kl = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    for (t, want) in [(1, -kl), (2, -2.0 * kl)] {
        let spec = skewed_binomial(t);
        let lift = build_lift(&spec, 2).unwrap();
        let f = backward_induction(&spec, &lift, &zero_claim(&spec), &Statics::Fixed(vec![]), &cfg).unwrap();
        println!("T={t} L={} gap={:e}", f.log_value, f.gap_bound);
        assert!((f.log_value - want).abs() < 1e-9, "{} vs {want}", f.log_value);
        let ex = extract_strategy(&spec, &lift, &f, &cfg, 1e-6).unwrap();
        println!("h={:?} extracted={:?}", f.h, ex.h);
        assert!((f.dual.cond[0][0] - 0.5).abs() < 1e-6, "{:?}", f.dual.cond[0]);
    }
}

#[test]
fn constant_price_zero_endowment() {
    let spec = constant_price(2);
    let lift = build_lift(&spec, 2).unwrap();
    let v = robust_value(&spec, &lift, &spec.claims.endowment, &[], &SolverConfig::default()).unwrap();
    assert!(v.log_value.abs() < 1e-9 && (v.utility + 1.0).abs() < 1e-9);
}

#[test]
fn hedging_a_unit_of_stock() {
    let cfg = SolverConfig::default();
    // frictionless: perfect replication, replay = −X₀
    let sym = MarketSpec::from_document(additive_binomial(1, 3.0, 1.0, &[vec![0.5, 0.5]], 0.0)).unwrap();
    let spec = with_terminal_claim(&sym, |_| vec![1.0, 0.0]);
    let lift = build_lift(&spec, 2).unwrap();
    let phi = Payoff::Claim(spec.claims.endowment.iter().map(|v| v.iter().map(|x| -x).collect()).collect());
    let f = backward_induction(&spec, &lift, &phi, &Statics::Fixed(vec![]), &cfg).unwrap();
    let ex = extract_strategy(&spec, &lift, &f, &cfg, 1e-6).unwrap();
    println!("frictionless {} h={:?}", ex.replay_value, ex.h[0]);
    assert!((ex.replay_value + 3.0).abs() < 1e-7);
    assert!((ex.h[0][0] - 1.0).abs() < 1e-6);
    let q = |s: f64| (s, s * 0.98, s * 1.02);
    let sym = MarketSpec::from_document(one_period(q(1.0), q(1.2), q(0.8), &[vec![0.5, 0.5]], 1.1)).unwrap();
    let spec = with_terminal_claim(&sym, |_| vec![1.0, 0.0]);
    let lift = build_lift(&spec, 2).unwrap();
    let phi = Payoff::Claim(spec.claims.endowment.iter().map(|v| v.iter().map(|x| -x).collect()).collect());
    let f = backward_induction(&spec, &lift, &phi, &Statics::Fixed(vec![]), &cfg).unwrap();
    let ex = extract_strategy(&spec, &lift, &f, &cfg, 1e-6).unwrap();
    println!("spread {} root {}", ex.replay_value, f.root_value);
    assert!(ex.replay_value > -1.0 + 1e-6);
    let table = f.payoff_table(&spec);
    assert!((replay(&spec, &lift, &f.h, &table) - f.root_value).abs() < 1e-9);
}
