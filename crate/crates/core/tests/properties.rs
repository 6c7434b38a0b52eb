use ffgvi_core::engine::{infer, InferenceConfig};
use ffgvi_core::exponential_families::{
    gaussian_to_moments, gaussian_to_natural, multiply_same_family, Belief, GammaBelief, GaussianBelief, Message,
};
use ffgvi_core::graph::validate_proper;
use ffgvi_core::models::{build_noisy, build_pge, synthetic, PgePriors, SyntheticSpec};
use proptest::prelude::*;

fn gaussian() -> impl Strategy<Value = GaussianBelief> {
    (-50.0..50.0f64, 1e-3..1e3f64).prop_map(|(m, v)| GaussianBelief::from_moments(m, v).unwrap())
}

fn gamma() -> impl Strategy<Value = GammaBelief> {
    (1e-2..1e3f64, 1e-2..1e3f64).prop_map(|(a, b)| GammaBelief::new(a, b).unwrap())
}

proptest! {
    #[test]
    fn gaussian_parameterizations_round_trip(m in -1e3..1e3f64, v in 1e-4..1e4f64) {
        let (e1, e2) = gaussian_to_natural(m, v).unwrap();
        let (m2, v2) = gaussian_to_moments(e1, e2).unwrap();
        prop_assert!((m2 - m).abs() <= 1e-9 * m.abs().max(1.0));
        prop_assert!((v2 / v - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gamma_natural_round_trip(g in gamma()) {
        let eta = g.natural();
        let back = GammaBelief::from_natural(eta[0], eta[1]).unwrap();
        prop_assert!((back.alpha() / g.alpha() - 1.0).abs() <= 1e-12);
        prop_assert!((back.beta() / g.beta() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gaussian_product_adds_precisions(a in gaussian(), b in gaussian()) {
        let p = match multiply_same_family(&Message::Gaussian(a), &Message::Gaussian(b)).unwrap() {
            Belief::Gaussian(p) => p,
            other => panic!("{other:?}"),
        };
        prop_assert!((p.precision() / (a.precision() + b.precision()) - 1.0).abs() <= 1e-12);
        let mean = (a.precision() * a.mean() + b.precision() * b.mean()) / (a.precision() + b.precision());
        prop_assert!((p.mean() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
    }

    #[test]
    fn gamma_product_adds_natural_parameters(a in gamma(), b in gamma()) {
        let p = match multiply_same_family(&Message::Gamma(a), &Message::Gamma(b)).unwrap() {
            Belief::Gamma(p) => p,
            other => panic!("{other:?}"),
        };
        prop_assert!((p.alpha() - (a.alpha() + b.alpha() - 1.0)).abs() <= 1e-9 * p.alpha());
        prop_assert!((p.beta() - (a.beta() + b.beta())).abs() <= 1e-9 * p.beta());
    }

    #[test]
    fn fisher_matrices_are_positive_definite(g in gaussian(), q in gamma()) {
        for f in [g.fisher(), q.fisher()] {
            prop_assert!(f[(0, 0)] > 0.0);
            prop_assert!(f.determinant() > 0.0);
            prop_assert!((f[(0, 1)] - f[(1, 0)]).abs() <= 1e-12 * f.abs().max());
        }
    }

    #[test]
    fn gaussian_mgf_is_closed_form(g in gaussian()) {
        prop_assume!(g.mean() + 0.5 * g.var() < 500.0);
        let expected = (g.mean() + 0.5 * g.var()).exp();
        prop_assert!((g.mgf().unwrap() / expected - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn builders_emit_proper_graphs(seed in 0u64..1000, n in 1usize..4, m in 1usize..6, d in 1usize..4, diag: bool) {
        let s = synthetic(&SyntheticSpec { seed, n_experts: n, n_obs: m, dim: d, heteroscedastic: true }).unwrap();
        let p = PgePriors::standard(n, d + 1);
        for g in [
            build_pge(&s.data, &p, diag).unwrap().graph,
            build_noisy(&s.data, &p, diag, false).unwrap().graph,
            build_noisy(&s.data.without_targets(), &p, diag, true).unwrap().graph,
        ] {
            let r = validate_proper(&g);
            prop_assert!(r.is_proper(), "{:?}", r);
        }
    }

    #[test]
    fn free_energy_never_increases(seed in 0u64..1000, diag: bool, noisy: bool) {
        let s = synthetic(&SyntheticSpec { seed, n_experts: 2, n_obs: 12, dim: 2, heteroscedastic: seed % 2 == 0 }).unwrap();
        let p = PgePriors::standard(2, 3);
        let g = if noisy { build_noisy(&s.data, &p, diag, false) } else { build_pge(&s.data, &p, diag) }.unwrap().graph;
        let m = infer(&g, &InferenceConfig::with_sweeps(4)).unwrap();
        for w in m.bfe_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6, "{:?}", m.bfe_trace);
        }
    }

    #[test]
    fn inference_is_deterministic(seed in 0u64..1000) {
        let s = synthetic(&SyntheticSpec { seed, n_experts: 2, n_obs: 6, dim: 2, heteroscedastic: true }).unwrap();
        let g = build_pge(&s.data, &PgePriors::standard(2, 3), false).unwrap().graph;
        let cfg = InferenceConfig::with_sweeps(2);
        prop_assert_eq!(infer(&g, &cfg).unwrap(), infer(&g, &cfg).unwrap());
    }
}
