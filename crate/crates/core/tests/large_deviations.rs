//! Large-deviation rates: shape near the origin and the empirical tails.

use nalgebra::DMatrix;

use ldpnn::gauss_expect::ExpectSpec;
use ldpnn::rates::{md_rate, output_rate_iz};
use ldpnn::recursion::limit_cov_chain;
use ldpnn::shallow::{shallow_ld_rate, shallow_md_rate, DerivativePattern};
use ldpnn::simulator::{estimate_tail, predicted_rate, HalfSpace, Scaling, WidthSchedule};
use ldpnn::{Activation, InputSet, NetworkConfig};

fn z(t: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, t)
}

#[test]
fn output_rate_grows_along_a_ray_and_is_quadratic_at_zero() {
    let spec = ExpectSpec::default();
    let model = NetworkConfig::new(2, 1, 1, 0.1, 1.3, Activation::Tanh);
    let inputs = InputSet::new(vec![vec![0.9]]);
    let values: Vec<f64> = [0.0, 0.3, 0.6, 1.0, 1.5]
        .iter()
        .map(|&t| {
            output_rate_iz(&z(t), &model, &inputs, &spec)
                .unwrap()
                .value
                .value()
        })
        .collect();
    assert_eq!(values[0], 0.0);
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");

    let ghat = limit_cov_chain(&model, &inputs, &spec).unwrap();
    let eps = 0.05;
    let ld = output_rate_iz(&z(eps), &model, &inputs, &spec)
        .unwrap()
        .value
        .value();
    let md = md_rate(&z(eps), &ghat[1]).unwrap().value();
    assert!((ld / md - 1.0).abs() < 0.05, "ld {ld} md {md}");
}

#[test]
fn shallow_rate_is_quadratic_at_zero() {
    let spec = ExpectSpec::default();
    let model = NetworkConfig::new(1, 1, 1, 0.3, 1.0, Activation::Tanh);
    let inputs = InputSet::new(vec![vec![1.0]]);
    for s in [0u8, 1] {
        let p = DerivativePattern(vec![s]);
        let ld = shallow_ld_rate(&z(0.01), &model, &inputs, &p, &spec)
            .unwrap()
            .value
            .value();
        let md = shallow_md_rate(&z(0.01), &model, &inputs, &p, &spec)
            .unwrap()
            .value
            .value();
        assert!((ld / md - 1.0).abs() < 0.01, "s={s}: ld {ld} md {md}");
        let far = shallow_ld_rate(&z(0.5), &model, &inputs, &p, &spec)
            .unwrap()
            .value
            .value();
        assert!(far > ld);
    }
}

#[test]
fn empirical_tail_decays_at_roughly_the_predicted_speed() {
    let spec = ExpectSpec::default();
    let model = NetworkConfig::new(1, 1, 1, 0.0, 1.0, Activation::HardClip);
    let inputs = InputSet::new(vec![vec![1.0]]);
    let event = HalfSpace {
        alpha: 0,
        output: 0,
        thresholds: vec![0.25],
    };
    let schedule = WidthSchedule {
        pivots: vec![8, 16, 24, 32],
    };
    let study = estimate_tail(&model, &inputs, &schedule, &event, Scaling::Ld, 200_000, 3).unwrap();
    let usable: Vec<f64> = study
        .estimates
        .iter()
        .filter(|e| !e.insufficient_hits)
        .map(|e| e.log_prob)
        .collect();
    assert!(usable.len() >= 3);
    assert!(usable.windows(2).all(|w| w[1] < w[0]), "{usable:?}");
    let predicted = predicted_rate(&model, &inputs, Scaling::Ld, &event, 0.25, &spec)
        .unwrap()
        .unwrap()
        .value();
    let fit = study.fits[0].as_ref().unwrap();
    assert!(
        fit.slope > 0.5 * predicted && fit.slope < 2.0 * predicted,
        "fitted {} predicted {predicted}",
        fit.slope
    );
}
