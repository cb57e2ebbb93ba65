use entropic_hedge::fixtures::{random_market, spread_binomial, with_terminal_claim, RandomMarketConfig};
use entropic_hedge::lift::{
    build_lift, clamp_price, strategy_to_transfers, transfers_for_claim, transfers_to_strategy, Strategy,
};
use entropic_hedge::market::MarketSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_strategy(spec: &MarketSpec, rng: &mut ChaCha8Rng) -> Strategy {
    let mut s = Strategy::zero(spec);
    for k in spec.tree.internal() {
        for i in 0..spec.d() - 1 {
            s.h[k][i] = rng.gen_range(-3.0..3.0);
        }
    }
    for l in s.ell.iter_mut() {
        *l = rng.gen_range(-1.0..1.0);
    }
    s
}

#[test]
fn clamp_examples() {
    assert_eq!(clamp_price(&[2.0, 5.0], &[1.2, 0.9], &[1.9, 4.0], &[2.2, 4.6]), vec![2.2, 4.5, 1.0]);
    assert_eq!(clamp_price(&[1.0], &[0.5], &[0.98], &[1.02]), vec![0.98, 1.0]);
    assert_eq!(clamp_price(&[1.0], &[1.0], &[0.98], &[1.02]), vec![1.0, 1.0]);
}

#[test]
fn grid_shape() {
    let spec = spread_binomial();
    let lift = build_lift(&spec, 5).unwrap();
    assert_eq!(lift.points(), 5);
    assert_eq!(lift.corners.len(), 2);
    // odd m contains θ = 1, which maps to the mid price
    assert!(lift.grid.points.iter().any(|t| (t[0] - 1.0).abs() < 1e-15));
    for k in 0..spec.tree.len() {
        let xs: Vec<f64> = lift.x[k].iter().map(|x| x[0]).collect();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]), "monotone in θ");
        assert_eq!(xs[0], spec.cones.bid[k][0]);
        assert_eq!(xs[4], spec.cones.ask[k][0]);
        assert_eq!(xs[2], spec.cones.mid[k][0]);
    }
    assert!(build_lift(&spec, 1).is_err());
}

#[test]
fn one_period_unit_purchase() {
    let spec = with_terminal_claim(&spread_binomial(), |_| vec![0.0, 0.0]);
    let mut s = Strategy::zero(&spec);
    s.h[0][0] = 1.0;
    let tr = strategy_to_transfers(&spec, &s);
    assert_eq!(tr.eta[0], vec![1.0, -1.02]);
    // liquidate at the bid on both leaves
    for k in spec.tree.terminals() {
        assert_eq!(tr.eta[k], vec![-1.0, spec.cones.bid[k][0]]);
    }
}

#[test]
fn worst_case_identity_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let spec = random_market(&mut rng, &RandomMarketConfig::default());
        let lift = build_lift(&spec, 2).unwrap();
        for _ in 0..5 {
            let s = random_strategy(&spec, &mut rng);
            let claim = entropic_hedge::lift::effective_endowment(&spec, &s.ell);
            let tr = transfers_for_claim(&spec, &s.h, &claim);
            for leaf in spec.tree.terminals() {
                let wealth = tr.liquidated_wealth(&spec, &claim, leaf);
                let worst = lift
                    .theta_paths(&spec, leaf)
                    .iter()
                    .map(|p| lift.hedged_value(&spec, &s.h, &claim, leaf, p))
                    .fold(f64::INFINITY, f64::min);
                assert!((worst - wealth).abs() <= 1e-12 * (1.0 + wealth.abs()) * 10.0, "{worst} vs {wealth}");
            }
            let (h, cert) = transfers_to_strategy(&spec, &lift, &tr, &claim).unwrap();
            assert!(cert.worst_margin >= -1e-10);
            for k in spec.tree.internal() {
                for i in 0..spec.d() - 1 {
                    assert!((h[k][i] - s.h[k][i]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn insolvent_transfers_are_rejected() {
    let spec = with_terminal_claim(&spread_binomial(), |_| vec![0.0, 0.0]);
    let lift = build_lift(&spec, 2).unwrap();
    let mut s = Strategy::zero(&spec);
    s.h[0][0] = 1.0;
    let mut tr = strategy_to_transfers(&spec, &s);
    tr.eta[0][1] += 0.01; // buying below the ask
    assert!(transfers_to_strategy(&spec, &lift, &tr, &spec.claims.endowment).is_err());
}
