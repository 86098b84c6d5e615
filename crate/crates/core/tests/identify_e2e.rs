mod common;

use diffnet_core::netmodel::{assemble_a, discretize};
use diffnet_core::pipeline::{identify, IdentifyOptions};
use diffnet_core::simulate::{generate, white_excitation, Dataset, NoiseSpec};
use diffnet_core::structured::ParamRef;
use diffnet_core::Error;

fn benchmark_data(k: usize, c1: f64, sigma2: f64, n: usize, seed: u64) -> Dataset {
    let model = common::four_node_model(k, c1, sigma2);
    let r = white_excitation(k, n, 1.0, seed).unwrap();
    generate(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: seed + 1 }).unwrap()
}

#[test]
fn noiseless_benchmark_is_recovered_exactly() {
    let d = benchmark_data(1, 0.0, 0.0, 2000, 1);
    let res = identify(&d, &common::four_node_spec(1, 0), 2, &IdentifyOptions::default()).unwrap();
    let truth = common::component_vector(&common::four_node_network(1));
    let got = common::component_vector(&res.continuous);
    for (g, t) in got.iter().zip(&truth) {
        assert!((g - t).abs() < 1e-6 * t.abs().max(1.0), "{g} vs {t}");
    }
    assert_eq!(res.topology, vec![(0, 1), (1, 2), (1, 3), (2, 3)]);
    assert!(res.step2.noiseless);
}

#[test]
fn result_invariants_hold_on_noisy_data() {
    let d = benchmark_data(3, 0.1, 1e-4, 4000, 3);
    let spec = common::four_node_spec(3, 1);
    let res = identify(&d, &spec, 5, &IdentifyOptions::default()).unwrap();

    assert!(res.diagnostics.feasibility < 1e-9);
    assert!(res.diagnostics.a0_rank.full_rank);
    assert_eq!(assemble_a(&res.xbar, &res.ybar).unwrap(), res.a);
    assert!((res.c.coeff(0) - nalgebra::DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
    let allowed = spec.allowed_pairs();
    assert!(res.topology.iter().all(|p| allowed.contains(p)));
    let cost = |i: usize| res.structured.cost_trace[i];
    assert!(cost(res.structured.selected) <= res.step2.cost_trace[0]);

    // Step 6 inverts Step 5 of the forward map.
    let back = discretize(&res.continuous, res.ts).unwrap();
    assert!((&back.xbar.padded(2).coeffs()[0] - res.xbar.coeff(0)).amax() < 1e-9);
    for l in 0..=2 {
        let scale = res.ybar.coeff(l).amax().max(1.0);
        assert!((back.ybar.padded(2).coeff(l) - res.ybar.coeff(l)).amax() < 1e-9 * scale);
        assert!((back.xbar.padded(2).coeff(l) - res.xbar.coeff(l)).amax() < 1e-9 * scale);
    }
}

#[test]
fn noise_filter_is_recovered() {
    // The filter is only visible through the expansion tail, so it needs a
    // long ARX order and noise that is not negligible against the response.
    let d = benchmark_data(3, 0.1, 0.1, 20_000, 11);
    let res = identify(&d, &common::four_node_spec(3, 1), 8, &IdentifyOptions::default()).unwrap();
    let eye = nalgebra::DMatrix::<f64>::identity(4, 4);
    let c1 = res.c.coeff(1);
    assert!((c1 - &eye * 0.1).amax() < 0.05, "{c1}");
    let rel = (&res.lambda - &eye * 0.1).norm() / (0.1 * eye.norm());
    assert!(rel < 0.1, "{rel}");
}

#[test]
fn runs_are_deterministic() {
    let spec = common::four_node_spec(1, 1);
    let run = || {
        let d = benchmark_data(1, 0.1, 1e-4, 1500, 9);
        identify(&d, &spec, 4, &IdentifyOptions::default()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn short_data_fails_at_the_first_step() {
    let d = benchmark_data(1, 0.1, 1e-4, 20, 5);
    let forced = IdentifyOptions { force: true, ..IdentifyOptions::default() };
    let err = identify(&d, &common::four_node_spec(1, 1), 5, &forced).unwrap_err();
    assert_eq!(err.step(), Some(1), "{err}");
    assert!(matches!(err.root(), Error::InsufficientExcitation(_)));
}

#[test]
fn failing_checks_stop_unless_forced() {
    let d = benchmark_data(1, 0.1, 1e-4, 500, 7);
    let mut spec = common::four_node_spec(1, 1);
    spec.fix(ParamRef::B { i: 0, j: 0, lag: 0 }, 0.0).unwrap();
    let err = identify(&d, &spec, 3, &IdentifyOptions::default()).unwrap_err();
    assert!(matches!(err, Error::CheckFailed(_)), "{err}");

    let forced = IdentifyOptions { force: true, ..IdentifyOptions::default() };
    let err = identify(&d, &spec, 3, &forced).unwrap_err();
    assert_eq!(err.step(), Some(2), "{err}");
}

#[test]
fn constant_excitation_is_not_informative() {
    let model = common::four_node_model(1, 0.0, 1e-4);
    let r = nalgebra::DMatrix::from_element(1, 400, 1.0);
    let d = generate(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: 3 }).unwrap();
    let err = identify(&d, &common::four_node_spec(1, 0), 2, &IdentifyOptions::default()).unwrap_err();
    assert!(matches!(err, Error::CheckFailed(_)), "{err}");
}
