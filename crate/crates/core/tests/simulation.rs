mod common;

use diffnet_core::netmodel::to_module_representation;
use diffnet_core::simulate::{
    autocorrelation, generate, generate_with_noise, innovation_covariance, model_prediction_error,
    predictor, sample_covariance, white_excitation, NoiseSpec,
};
use nalgebra::DMatrix;

#[test]
fn true_model_prediction_error_is_white() {
    let model = common::four_node_model(3, 0.1, 1e-4);
    let n = 10_000;
    let r = white_excitation(3, n, 1.0, 41).unwrap();
    let d = generate(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: 42 }).unwrap();
    let eps = model_prediction_error(&model, &d).unwrap();
    let rho = autocorrelation(&eps, 20);
    // Under whiteness each value has standard deviation 1/sqrt(N); a max over
    // 80 values exceeds 3/sqrt(N) about 20% of the time, so bound the tail
    // fraction at 3 sigma and the max at 5 sigma.
    let sigma = 1.0 / (n as f64).sqrt();
    let outside = rho.iter().filter(|v| v.abs() > 3.0 * sigma).count();
    assert!(outside <= 4, "{outside} of 80 autocorrelations beyond 3 sigma");
    assert!(rho.amax() < 5.0 * sigma, "max autocorrelation {}", rho.amax());
}

#[test]
fn innovation_covariance_matches_sample() {
    let mut model = common::four_node_model(3, 0.1, 1e-4);
    model.lambda = DMatrix::from_row_slice(4, 4, &[
        2.0, 0.3, 0.0, 0.1, //
        0.3, 1.0, 0.2, 0.0, //
        0.0, 0.2, 1.5, 0.4, //
        0.1, 0.0, 0.4, 3.0,
    ]) * 1e-4;
    let n = 100_000;
    let r = white_excitation(3, n, 1.0, 43).unwrap();
    let d = generate(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: 44 }).unwrap();
    let eps = model_prediction_error(&model, &d).unwrap();
    let want = innovation_covariance(model.a0(), &model.lambda).unwrap();
    let got = sample_covariance(&eps);
    let rel = (&got - &want).norm() / want.norm();
    assert!(rel < 0.05, "relative Frobenius error {rel}");
}

#[test]
fn prediction_error_recovers_the_generating_noise() {
    let model = common::four_node_model(2, 0.1, 1e-4);
    let r = white_excitation(2, 500, 1.0, 45).unwrap();
    let (d, e) = generate_with_noise(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: 46 }).unwrap();
    let eps = model_prediction_error(&model, &d).unwrap();
    let want = model.a0().clone().try_inverse().unwrap() * e;
    assert!((&eps - &want).amax() < 1e-9 * want.amax());
}

#[test]
fn predictor_plus_prediction_error_reproduces_data() {
    let model = common::four_node_model(3, 0.1, 1e-4);
    let r = white_excitation(3, 400, 1.0, 47).unwrap();
    let d = generate(&model, &r, &NoiseSpec { lambda: model.lambda.clone(), seed: 48 }).unwrap();
    let w_hat = predictor(&model, &d).unwrap();
    let eps = model_prediction_error(&model, &d).unwrap();
    assert!((&d.w - (w_hat + eps)).amax() < 1e-9 * d.w.amax());
}

#[test]
fn benchmark_module_representation_is_consistent() {
    let model = common::four_node_model(3, 0.0, 0.0);
    let rep = to_module_representation(&model.a, &model.b).unwrap();
    assert_eq!(rep.g.len(), 4);
    for j in 0..4 {
        assert!(rep.g[j][j].is_zero());
        for k in 0..4 {
            // Couplings are symmetric, so the module numerators match.
            let (a, b) = (&rep.g[j][k], &rep.g[k][j]);
            assert_eq!(a.num.len(), b.num.len());
            for (x, y) in a.num.iter().zip(&b.num) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    let coupled = |j: usize, k: usize| !rep.g[j][k].is_zero();
    assert!(coupled(0, 1) && coupled(1, 2) && coupled(1, 3) && coupled(2, 3));
    assert!(!coupled(0, 2) && !coupled(0, 3));
    assert!(!rep.r[0][0].is_zero() && rep.r[1][0].is_zero());
}
