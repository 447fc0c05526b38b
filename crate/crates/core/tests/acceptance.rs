//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use bellman_lab::bsde::{self, BsdeOptions, BsdeProblem};
use bellman_lab::market::{simulate_paths, MarketModel, PathEnsemble, StrategyRule, TimeGrid};
use bellman_lab::pde::{convergence_table, feynman_kac_mc, solve_linear, Coordinate, PdeKind, PdeSpec};
use bellman_lab::utility::{Claim, UtilitySpec};
use bellman_lab::valuation::{
    closed_form, exponential_value, from_bsde, power_value_case1_pde, power_value_case2, quadratic_value,
    strategy_from_value, ExponentialInputs, ValueProcess,
};
use bellman_lab::verify::{
    brute_force_value, driver_argmax_check, forward_sde_crosscheck, proportion_grid, scaled_rule,
    supermartingale_test,
};
use proptest::test_runner::{Config, RngSeed, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X0: f64 = 1.0;
const PATHS: usize = 10_000;
const STEPS: usize = 100;
const TEST_TIMES: [f64; 3] = [0.25, 0.5, 0.75];
const PERTURBATIONS: [f64; 5] = [0.5, 0.75, 1.25, 1.5, 0.0];

/// Sub-checks of one criterion.
#[derive(Default)]
struct Report {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            self.notes.push(format!("{name}: {detail}"));
        } else {
            self.failures.push(format!("{name}: {detail}"));
        }
    }

    fn rel(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        let rel = (got - want).abs() / want.abs();
        self.check(name, rel <= tol, format!("{got:.6} vs {want:.6} (rel {rel:.2e}, tol {tol:.0e})"));
    }
}

fn merton() -> MarketModel {
    MarketModel::black_scholes(0.1, 0.2, 1.0).unwrap()
}

fn ensemble(model: &MarketModel, steps: usize, paths: usize, seed: u64) -> PathEnsemble {
    simulate_paths(model, TimeGrid::new(1.0, steps).unwrap(), paths, seed).unwrap()
}

fn proportion_of(vp: &ValueProcess, x: f64) -> f64 {
    vp.optimal_holdings(0.0, x, &[1.0], &[]).unwrap()[0] / x
}

fn criterion_1() -> Report {
    let mut r = Report::default();
    let model = merton();
    let vp = Arc::new(closed_form(&UtilitySpec::Log, &model, 1.0).unwrap());
    let v0 = vp.value(0.0, X0, &[1.0], &[]).unwrap();
    r.check("closed form", (v0 - 0.125).abs() <= 1e-12, format!("V0 - log x0 = {v0:.12}"));
    let ens = ensemble(&model, STEPS, PATHS, 20240601);
    let grid = proportion_grid(0.0, 5.0, 0.5).unwrap();
    let bf = brute_force_value(&model, &UtilitySpec::Log, &grid, &[0.0], &ens, X0).unwrap();
    r.check(
        "brute force",
        (bf.best_value - 0.125).abs() <= 3.0 * bf.best_stderr,
        format!("best {:.5} +- {:.1e} at {:?}", bf.best_value, bf.best_stderr, bf.best().proportions),
    );
    let cc = forward_sde_crosscheck(vp, &ens, X0, 0.01).unwrap();
    r.check("forward SDE", cc.pass, format!("{:.5} vs {:.5}, tol {:.1e}", cc.mean, cc.v0, cc.tolerance));
    r
}

fn criterion_2() -> Report {
    let mut r = Report::default();
    let model = merton();
    let u = UtilitySpec::power(0.5).unwrap();
    let exact = 0.125f64.exp();
    let ens = ensemble(&model, STEPS, PATHS, 20240602);
    let case2 = power_value_case2(&u, &model, &ens, 3).unwrap();
    r.rel("Case 2 formula", case2.factor(0.0, &[1.0], &[]).unwrap(), exact, 0.01);
    let case1 = power_value_case1_pde(&u, &model, 1.0, 201, 200).unwrap();
    r.rel("Case 1 PDE", case1.factor(0.0, &[1.0], &[]).unwrap(), exact, 0.01);
    let sol = bsde::solve(&BsdeProblem::for_utility(&u, &model, &ens).unwrap(), &BsdeOptions::default()).unwrap();
    r.rel("BSDE", sol.v0().mean, exact, 0.01);
    let step = 0.5;
    for (name, vp) in [("strategy (PDE route)", &case1), ("strategy (Case 2 route)", &case2)] {
        let p = proportion_of(vp, X0);
        r.check(name, (p - 5.0).abs() <= step, format!("proportion {p:.4}"));
    }
    let grid = proportion_grid(0.0, 7.0, step).unwrap();
    let bf = brute_force_value(&model, &u, &grid, &[0.0], &ens, X0).unwrap();
    let arg = bf.best().proportions[0];
    r.check("brute force argmax", (arg - 5.0).abs() <= step, format!("argmax {arg} (step {step})"));
    r
}

fn criterion_3() -> Report {
    let mut r = Report::default();
    let model = merton();
    let u = UtilitySpec::exponential(1.0, Claim::Zero).unwrap();
    let exact = (-0.125f64).exp();
    let cf = exponential_value(&u, &model, 1.0, ExponentialInputs::ClosedForm, 1e3).unwrap();
    r.rel("closed form", cf.factor(0.0, &[1.0], &[]).unwrap(), exact, 0.01);
    let ens = ensemble(&model, STEPS, PATHS, 20240603);
    let sol = bsde::solve(&BsdeProblem::for_utility(&u, &model, &ens).unwrap(), &BsdeOptions::default()).unwrap();
    r.rel("BSDE", sol.v0().mean, exact, 0.01);
    let pde = exponential_value(
        &u,
        &model,
        1.0,
        ExponentialInputs::Case1 { coordinate: Coordinate::LogPrice, n_space: 201, n_time: 200 },
        1e3,
    )
    .unwrap();
    r.rel("PDE", pde.factor(0.0, &[1.0], &[]).unwrap(), exact, 0.01);
    for x in [0.5, 1.0, 2.0] {
        for (name, vp) in [("closed form", &cf), ("PDE", &pde)] {
            let amount = vp.optimal_holdings(0.0, x, &[1.0], &[]).unwrap()[0];
            r.check(&format!("amount at x = {x} ({name})"), (amount - 2.5).abs() <= 1e-9, format!("{amount:.12}"));
        }
    }
    r
}

fn criterion_4() -> Report {
    let mut r = Report::default();
    let model = merton();
    let b = 1.0;
    let u = UtilitySpec::quadratic(b).unwrap();
    let ens = ensemble(&model, STEPS, PATHS, 20240604);
    let sol = bsde::solve(&BsdeProblem::for_utility(&u, &model, &ens).unwrap(), &BsdeOptions::default()).unwrap();
    r.rel("BSDE V0", sol.v0().mean, (-0.25f64).exp(), 0.01);
    let at_b = quadratic_value(&u, &model, &sol, 0.0, b, &[1.0], &[]).unwrap();
    r.check("value at x = b", (at_b.value - b * b).abs() <= 1e-12, format!("{:.12}", at_b.value));
    let vp = from_bsde(&u, &model, &sol).unwrap();
    let h = vp.optimal_holdings(0.0, b, &[1.0], &[]).unwrap()[0];
    r.check("strategy at x = b", h.abs() <= 1e-12, format!("{h:.3e}"));
    r
}

fn criterion_5() -> Report {
    let mut r = Report::default();
    let model = merton();
    let cases: [(&str, UtilitySpec, f64, u64); 4] = [
        ("log", UtilitySpec::Log, 1.0, 20240601),
        ("power", UtilitySpec::power(0.5).unwrap(), 1.0, 20240602),
        ("exponential", UtilitySpec::exponential(1.0, Claim::Zero).unwrap(), 1.0, 20240603),
        ("quadratic", UtilitySpec::quadratic(1.0).unwrap(), 0.5, 20240604),
    ];
    for (name, u, x0, seed) in cases {
        let vp = Arc::new(closed_form(&u, &model, 1.0).unwrap());
        let ens = ensemble(&model, STEPS, PATHS, seed);
        let mut optimal: StrategyRule = strategy_from_value(vp.clone());
        if u.positive_domain() {
            optimal = optimal.with_default_floor(x0);
        }
        let rep = supermartingale_test(&vp, &optimal, &ens, x0, &TEST_TIMES).unwrap();
        let zs: Vec<String> = rep.checks.iter().map(|c| format!("{:.2}", c.z)).collect();
        r.check(&format!("{name} optimal martingale"), rep.martingale_ok(), format!("z = [{}]", zs.join(", ")));
        r.check(&format!("{name} optimal clipping"), rep.clip_count == 0, format!("{} events", rep.clip_count));
        for scale in PERTURBATIONS {
            let rep = supermartingale_test(&vp, &scaled_rule(&optimal, scale), &ens, x0, &TEST_TIMES).unwrap();
            let worst = rep.checks.iter().map(|c| c.z).fold(f64::NEG_INFINITY, f64::max);
            r.check(&format!("{name} x{scale} supermartingale"), rep.supermartingale_ok(), format!("max z {worst:.2}"));
        }
    }
    r
}

fn criterion_6() -> Report {
    let mut r = Report::default();
    let model = common::ou_model(1.0, 0.0);
    let spec = PdeSpec::from_model(PdeKind::FactorPower { q: -1.0 }, Coordinate::Factor, &model, 1.0, 201, 200).unwrap();
    let grid = solve_linear(&spec).unwrap();
    let width = spec.hi - spec.lo;
    let (a, b) = (spec.lo + 0.1 * width, spec.hi - 0.1 * width);
    let probes: Vec<(f64, f64)> = grid
        .space
        .iter()
        .copied()
        .filter(|x| *x >= a && *x <= b)
        .step_by(10)
        .map(|x| (0.0, x))
        .collect();
    let fk = feynman_kac_mc(&spec, &probes, 100_000, 606).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_se: f64 = 0.0;
    for e in &fk {
        worst = worst.max((grid.eval(0.0, e.x).unwrap() - e.mean).abs());
        worst_se = worst_se.max(e.stderr);
    }
    r.check(
        "factor PDE vs Feynman-Kac",
        worst <= 5e-3,
        format!("max abs {worst:.2e} over {} probes (max stderr {worst_se:.1e})", fk.len()),
    );
    r
}

fn criterion_7() -> Report {
    let mut r = Report::default();
    let model = merton();
    let spec =
        PdeSpec::from_model(PdeKind::AlmostCompletePower { q: -1.0 }, Coordinate::LogPrice, &model, 1.0, 33, 16).unwrap();
    let k = (spec.local)(0.0, spec.x0).potential;
    let rows = convergence_table(&spec, |t, _| (k * (1.0 - t)).exp(), 0.8, 3).unwrap();
    for row in rows.iter().skip(1) {
        let ratio = row.ratio.unwrap();
        r.check(
            &format!("PDE {}x{}", row.n_space, row.n_time),
            (3.0..=5.0).contains(&ratio),
            format!("ratio {ratio:.3}"),
        );
    }
    // backward solver against the scalar ODE solution
    let u = UtilitySpec::power(0.5).unwrap();
    let exact = 0.125f64.exp();
    let errors: Vec<(usize, f64, f64)> = [25, 50, 100]
        .into_iter()
        .map(|n| {
            let ens = ensemble(&model, n, 2000, 707);
            let sol = bsde::solve(&BsdeProblem::for_utility(&u, &model, &ens).unwrap(), &BsdeOptions::default()).unwrap();
            (n, sol.v0().mean - exact, sol.v0().stderr)
        })
        .collect();
    for w in errors.windows(2) {
        let ((n1, e1, s1), (n2, e2, s2)) = (w[0], w[1]);
        let ratio = e1 / e2;
        let sd = ratio.abs() * ((s1 / e1).powi(2) + (s2 / e2).powi(2)).sqrt();
        let tol = 3.0 * sd + BSDE_HALVING_ALLOWANCE * 2.0;
        r.check(
            &format!("BSDE {n1}->{n2} steps"),
            (ratio - 2.0).abs() <= tol,
            format!("errors {e1:.3e} -> {e2:.3e}, ratio {ratio:.4} (stderr {sd:.1e})"),
        );
    }
    r
}

/// Relative allowance on the halving ratio for the second-order remainder,
/// which is all that is left when the Monte Carlo error vanishes.
const BSDE_HALVING_ALLOWANCE: f64 = 0.01;

fn criterion_8() -> Report {
    let mut r = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let candidates: Vec<f64> = (0..=300_000).map(|i| -150.0 + 1e-3 * i as f64).collect();
    let mut worst_rel: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..100 {
        let v_x = rng.random_range(0.1..5.0);
        let v_xx = -rng.random_range(0.1..5.0);
        let phi_x = rng.random_range(-2.0..2.0);
        let lambda = rng.random_range(-2.0..2.0);
        let nu = rng.random_range(0.01..1.0);
        let rep = driver_argmax_check(v_x, v_xx, phi_x, lambda, nu, &candidates).unwrap();
        worst_rel = worst_rel.max(rep.formula_relative_error);
        if !(rep.beats_grid && rep.within_one_step && rep.formula_relative_error <= 1e-8) {
            bad += 1;
        }
    }
    r.check("100 tuples", bad == 0, format!("{bad} failures, worst formula rel error {worst_rel:.1e}"));
    r
}

fn criterion_9() -> Report {
    let mut r = Report::default();
    let runner = |cases: u32| {
        TestRunner::new(Config {
            cases,
            rng_seed: RngSeed::Fixed(909),
            failure_persistence: None,
            ..Config::default()
        })
    };
    use common::*;
    use proptest::prelude::*;
    let out = runner(16).run(&(market_params(), 0.1f64..0.9, any::<u64>()), |((m, s, b), p, seed)| {
        positivity(m, s, b, p, seed)
    });
    r.check("positivity", out.is_ok(), format!("{out:?}"));
    let out = runner(16).run(&(0usize..4, market_params(), 0.2f64..3.0, 0.7f64..1.4), |(f, (m, s, b), x, s0)| {
        terminal_exactness(f, m, s, b, x, s0)
    });
    r.check("terminal exactness", out.is_ok(), format!("{out:?}"));
    let out = runner(16).run(&(0usize..4, market_params(), 0.0f64..0.95, 0.7f64..1.4), |(f, (m, s, b), t, s0)| {
        factorization(f, m, s, b, t, s0)
    });
    r.check("factorization", out.is_ok(), format!("{out:?}"));
    let out = runner(64).run(&(any::<u64>(), -1.0f64..1.0), |(seed, th)| seed_determinism(seed, th));
    r.check("seed determinism", out.is_ok(), format!("{out:?}"));
    let out = runner(64).run(&driver_tuple(), |(a, b, c, d, e)| argmax_scale_invariance(a, b, c, d, e));
    r.check("argmax scale invariance", out.is_ok(), format!("{out:?}"));
    r
}

type Criterion = (&'static str, fn() -> Report);

fn main() {
    let criteria: [Criterion; 9] = [
        ("Merton log benchmark", criterion_1),
        ("power benchmark", criterion_2),
        ("exponential benchmark", criterion_3),
        ("quadratic benchmark", criterion_4),
        ("optimality principle suite", criterion_5),
        ("PDE / Monte Carlo agreement", criterion_6),
        ("convergence orders", criterion_7),
        ("driver argmax property", criterion_8),
        ("invariant suite", criterion_9),
    ];
    let verbose = std::env::args().any(|a| a == "--verbose" || a == "--nocapture");
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let report = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Report {
                failures: vec![format!("panicked: {msg}")],
                notes: Vec::new(),
            }
        });
        let pass = report.failures.is_empty();
        failed += usize::from(!pass);
        println!(
            "{} criterion {}: {name} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
        for f in &report.failures {
            println!("    FAIL {f}");
        }
        if verbose || !pass {
            for n in &report.notes {
                println!("    ok   {n}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
