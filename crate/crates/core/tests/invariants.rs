use flowuq::armington::ArmingtonModel;
use flowuq::eb::{calibrate_baseline, estimate_me_variance, zero_probs_from_shares, ZeroShares};
use flowuq::model::{CounterfactualSpec, Provenance};
use flowuq::robust::robust_interval_from;
use flowuq::synthetic::{gravity_world, mirror_panel, WorldConfig};
use flowuq::uq::{interval_c1, interval_c1_partial, run_algorithm3, PpmlEstimator, UqConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn zero_probabilities_plug_back(p in 0.0f64..0.95, b in 0.0f64..0.95) {
        let q = 1.0 - p;
        let shares = ZeroShares { z2: p + q * b * b, z1: 2.0 * q * b * (1.0 - b), z0: q * (1.0 - b) * (1.0 - b) };
        let (pp, bb) = zero_probs_from_shares(shares);
        prop_assert!((pp - p).abs() < 1e-9 && (bb - b).abs() < 1e-9, "({pp}, {bb}) vs ({p}, {b})");
    }

    #[test]
    fn c1_lies_within_the_draws(v in prop::collection::vec(-1e6f64..1e6, 40..400), k in 1usize..4) {
        let b = v.len() / 40 * 40;
        let alpha = [0.05, 0.1, 0.2][k - 1];
        let draws = &v[..b];
        let i = interval_c1(draws, alpha).unwrap();
        let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= i.lo && i.lo <= i.hi && i.hi <= hi);
        prop_assert!(draws.contains(&i.lo) && draws.contains(&i.hi));
        prop_assert_eq!(i.draws_used + i.draws_failed, b);
    }

    #[test]
    fn robust_interval_nests_and_grows(v in prop::collection::vec(-100.0f64..100.0, 1000), c1 in 1.0f64..2.0, dc in 0.0f64..1.0) {
        let base = interval_c1(&v, 0.05).unwrap();
        let a = robust_interval_from(&v, v.len(), 0.05, c1).unwrap();
        let b = robust_interval_from(&v, v.len(), 0.05, c1 + dc).unwrap();
        prop_assert!(a.lo <= base.lo && base.hi <= a.hi);
        prop_assert!(b.lo <= a.lo && a.hi <= b.hi);
    }

    #[test]
    fn failed_draws_are_accounted(v in prop::collection::vec(-100.0f64..100.0, 200), drop in 0usize..8) {
        let part = interval_c1_partial(&v[drop..], v.len(), 0.1).unwrap();
        prop_assert_eq!(part.draws_used + part.draws_failed, v.len());
        prop_assert_eq!(part.conservative, drop > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mirror_variance_ignores_report_order(seed in 0u64..1000) {
        let world = gravity_world(&WorldConfig { n: 5, seed, ..Default::default() }).unwrap();
        let panel = mirror_panel(&world, 6, 0.1, 0.1, 0.2, 0.05, seed);
        let mut swapped = panel.clone();
        std::mem::swap(&mut swapped.report1, &mut swapped.report2);
        let a = estimate_me_variance(&panel);
        let b = estimate_me_variance(&swapped);
        prop_assert_eq!(a.unidentified, b.unidentified);
        prop_assert!((a.sigma2 - b.sigma2).abs().max() < 1e-15);
    }

    #[test]
    fn noiseless_data_collapses_to_estimation_error(seed in 0u64..1000) {
        let world = gravity_world(&WorldConfig { n: 6, seed, ..Default::default() }).unwrap();
        let params = calibrate_baseline(&world.observed, &world.distances, 0.0, None, None).unwrap();
        let est = PpmlEstimator::new(world.log_costs.clone());
        let model = ArmingtonModel::default();
        let spec = CounterfactualSpec::uniform_increase(6, 0.1).unwrap();
        let run = |mode| {
            let cfg = UqConfig { b: 40, seed, mode, ..Default::default() };
            run_algorithm3(&world.observed, &params, &est, &model, &spec, &cfg).unwrap()
        };
        let ee = run(Provenance::OnlyEe);
        let both = run(Provenance::EeMe);
        prop_assert_eq!(&ee.draws.draws, &both.draws.draws);
        prop_assert_eq!(ee.intervals, both.intervals);
        let me = run(Provenance::OnlyMe);
        let w = me.draws.draws.iter().zip(&me.point_estimate)
            .flat_map(|(d, p)| d.iter().map(move |x| (x - p).abs()))
            .fold(0.0, f64::max);
        prop_assert!(w < 1e-9, "only-ME spread {w}");
    }
}
