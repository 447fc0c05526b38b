mod common;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn value_factors_stay_positive((mu, sigma, beta) in market_params(), p in 0.1f64..0.9, seed in any::<u64>()) {
        positivity(mu, sigma, beta, p, seed)?;
    }

    #[test]
    fn terminal_values_equal_utility(
        family in 0usize..4,
        (mu, sigma, beta) in market_params(),
        x in 0.2f64..3.0,
        s in 0.7f64..1.4,
    ) {
        terminal_exactness(family, mu, sigma, beta, x, s)?;
    }

    #[test]
    fn wealth_factorization_is_exact(
        family in 0usize..4,
        (mu, sigma, beta) in market_params(),
        t in 0.0f64..0.95,
        s in 0.7f64..1.4,
    ) {
        factorization(family, mu, sigma, beta, t, s)?;
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn simulation_is_seed_deterministic(seed in any::<u64>(), theta1 in -1.0f64..1.0) {
        seed_determinism(seed, theta1)?;
    }

    #[test]
    fn driver_maximizer_is_scale_invariant((v_x, v_xx, phi_x, lambda, nu) in driver_tuple()) {
        argmax_scale_invariance(v_x, v_xx, phi_x, lambda, nu)?;
    }
}
