use entropic_hedge::dual::{best_candidate, dual_ascent, dual_objective, extract_cps, gibbs_candidate, MeasureSampler};
use entropic_hedge::fixtures::{
    random_market, skewed_binomial, spread_binomial, with_terminal_claim, RandomMarketConfig,
};
use entropic_hedge::lift::build_lift;
use entropic_hedge::primal::{backward_induction, log_claim, Payoff, Statics};
use entropic_hedge::solvers::SolverConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gibbs_candidate_closes_the_gap_on_the_skewed_binomial() {
    let cfg = SolverConfig::default();
    let spec = skewed_binomial(2);
    let lift = build_lift(&spec, 3).unwrap();
    let phi = Payoff::Claim(log_claim(&spec.claims.endowment, 1.0));
    let f = backward_induction(&spec, &lift, &phi, &Statics::Fixed(vec![]), &cfg).unwrap();
    let m = gibbs_candidate(&spec, &lift, &f);
    let obj = dual_objective(&spec, &m, &phi, &cfg, None);
    println!("L={} dual={} mart={:e}", f.log_value, obj, m.martingale_residual(&spec));
    assert!((obj - f.log_value).abs() < 1e-6);
    let cps = extract_cps(&spec, &m, &cfg);
    assert!(cps.martingale_residual(&spec) < 1e-6);
    assert!((cps.cond[0][0] - 0.5).abs() < 1e-6);
}

#[test]
fn ascent_does_not_lose_ground() {
    let cfg = SolverConfig::default();
    let base = spread_binomial();
    let spec = with_terminal_claim(&base, |s| vec![(s - 1.0).max(0.0), 0.0]);
    let lift = build_lift(&spec, 3).unwrap();
    let phi = log_claim(&spec.claims.endowment, 1.0);
    let f = backward_induction(&spec, &lift, &Payoff::Claim(phi.clone()), &Statics::Fixed(vec![]), &cfg).unwrap();
    let g = gibbs_candidate(&spec, &lift, &f);
    let gv = dual_objective(&spec, &g, &Payoff::Claim(phi.clone()), &cfg, None);
    let a = dual_ascent(&spec, &lift, &phi, (&f.dual.cond, &f.dual.z), &cfg, 300);
    println!("L={} gibbs={} ascent={} it={}", f.log_value, gv, a.objective, a.iterations);
    assert!(a.objective <= f.log_value + 1e-7);
    assert!(a.objective >= gv - 1e-6);
}

#[test]
fn duality_on_random_markets() {
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_strong = 0.0f64;
    for i in 0..10 {
        let spec = random_market(&mut rng, &RandomMarketConfig::default());
        let lift = build_lift(&spec, 3).unwrap();
        let phi = Payoff::Claim(log_claim(&spec.claims.endowment, spec.claims.gamma));
        let f = backward_induction(&spec, &lift, &phi, &Statics::Optimize, &cfg).unwrap();
        let Payoff::Claim(raw) = &phi else { unreachable!() };
        let (gv, g) = best_candidate(&spec, &lift, &f, raw, &cfg);
        worst_strong = worst_strong.max((f.log_value - gv).abs());
        println!(
            "#{i} L={:.8} gibbs={:.8} mart={:e} box={:e}",
            f.log_value,
            gv,
            g.martingale_residual(&spec),
            g.box_violation(&spec)
        );
        let sampler = MeasureSampler::new(&spec, &lift, &mut rng, 4);
        for _ in 0..20 {
            let m = sampler.sample(&spec, &lift, &mut rng);
            assert!(m.martingale_residual(&spec) < 1e-8);
            let v = dual_objective(&spec, &m, &phi, &cfg, None);
            assert!(v <= f.log_value + 1e-7, "weak duality {v} > {}", f.log_value);
        }
    }
    println!("worst strong gap {worst_strong:e}");
    assert!(worst_strong < 1e-6);
}
